"""Classical comparators: one-vs-one linear SVM and a fused Mahalanobis classifier."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ArgumentError, FitError, ShapeError
from .signal_prep import (FS, Standardizer, coherence_pairs, fit_standardizer, get_band,
                          psd_frequencies, welch_psd)

logger = logging.getLogger(__name__)

PSD_FLOOR = 1e-12
COH_CEIL = 1.0 - 1e-9
C_GRID = (0.01, 0.1, 1.0, 10.0, 100.0)


@dataclass(frozen=True)
class FeatureVector:
    """Element-structured features: ``values`` is ``(n_elements, dim)``."""

    kind: str
    values: np.ndarray

    @property
    def n_elements(self) -> int:
        return self.values.shape[0]


def _data(sub):
    return np.asarray(getattr(sub, "data", sub), dtype=np.float64)


def extract_psd_features(sub, fs: float = FS, nfft: int = 128) -> FeatureVector:
    """Log Welch PSD per electrode, all ``nfft // 2 + 1`` bins."""
    x = _data(sub)
    if x.ndim != 2:
        raise ShapeError(f"expected (channels, samples), got {x.shape}")
    p = welch_psd(x, fs=fs, nfft=nfft, seg_len=nfft, overlap=nfft // 2)
    return FeatureVector("PSD", np.log(np.maximum(p, PSD_FLOOR)))


def extract_coh_features(sub, band="all", fs: float = FS, nfft: int = 128) -> FeatureVector:
    """Fisher-z of |coherency| per electrode pair, restricted to ``band`` bins."""
    band = get_band(band)
    x = _data(sub)
    if x.ndim != 2:
        raise ShapeError(f"expected (channels, samples), got {x.shape}")
    msc, _ = coherence_pairs(x, fs=fs, nfft=nfft, seg_len=nfft, overlap=nfft // 2)
    f = psd_frequencies(fs, nfft)
    keep = (f >= band.low_hz) & (f <= band.high_hz)
    r = np.clip(np.sqrt(msc[:, keep]), 0.0, COH_CEIL)
    return FeatureVector("COH", np.arctanh(r))


# -- SVM -------------------------------------------------------------------

@dataclass
class BinarySvm:
    w: np.ndarray
    b: float
    alpha: np.ndarray
    iterations: int

    def decision(self, x):
        return np.asarray(x) @ self.w + self.b


def fit_binary_svm(x, y, C: float, tol: float = 1e-6, max_iter: int = 1_000_000) -> BinarySvm:
    """Soft-margin linear SVM: min 1/2 w'w + C sum(xi) s.t. y (w'x + b) >= 1 - xi.

    Solves the dual with SMO (maximal-violating-pair selection) until the
    KKT gap falls below ``tol``. ``y`` holds +1 / -1.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(y)
    if not set(np.unique(y)) <= {-1.0, 1.0} or len(np.unique(y)) != 2:
        raise ArgumentError("binary SVM needs labels from both of {-1, +1}")
    K = x @ x.T
    Q = (y[:, None] * y[None, :]) * K
    diag = np.diag(Q).copy()
    alpha = np.zeros(n)
    grad = -np.ones(n)
    it = 0
    for it in range(1, max_iter + 1):
        yg = -y * grad
        up = ((y > 0) & (alpha < C)) | ((y < 0) & (alpha > 0))
        low = ((y > 0) & (alpha > 0)) | ((y < 0) & (alpha < C))
        i = np.flatnonzero(up)[np.argmax(yg[up])]
        j = np.flatnonzero(low)[np.argmin(yg[low])]
        if yg[i] - yg[j] < tol:
            break
        ai, aj = alpha[i], alpha[j]
        if y[i] != y[j]:
            quad = max(diag[i] + diag[j] + 2 * Q[i, j], 1e-12)
            delta = (-grad[i] - grad[j]) / quad
            diff = ai - aj
            ai += delta
            aj += delta
            if diff > 0:
                if aj < 0:
                    aj, ai = 0.0, diff
            elif ai < 0:
                ai, aj = 0.0, -diff
            if diff > 0:
                if ai > C:
                    ai, aj = C, C - diff
            elif aj > C:
                aj, ai = C, C + diff
        else:
            quad = max(diag[i] + diag[j] - 2 * Q[i, j], 1e-12)
            delta = (grad[i] - grad[j]) / quad
            total = ai + aj
            ai -= delta
            aj += delta
            if total > C:
                if ai > C:
                    ai, aj = C, total - C
                if aj > C:
                    aj, ai = C, total - C
            else:
                if aj < 0:
                    aj, ai = 0.0, total
                if ai < 0:
                    ai, aj = 0.0, total
        grad += Q[:, i] * (ai - alpha[i]) + Q[:, j] * (aj - alpha[j])
        alpha[i], alpha[j] = ai, aj
    else:
        logger.warning("SMO hit max_iter=%d before reaching tol=%g", max_iter, tol)
    yg = y * grad
    free = (alpha > 0) & (alpha < C)
    if free.any():
        rho = yg[free].mean()
    else:
        at_ub = ((alpha >= C) & (y < 0)) | ((alpha <= 0) & (y > 0))
        at_lb = ((alpha >= C) & (y > 0)) | ((alpha <= 0) & (y < 0))
        ub = yg[at_ub].min() if at_ub.any() else np.inf
        lb = yg[at_lb].max() if at_lb.any() else -np.inf
        rho = (ub + lb) / 2
    w = (alpha * y) @ x
    return BinarySvm(w, float(-rho), alpha, it)


@dataclass
class SvmModel:
    classes: np.ndarray
    pairs: list
    W: np.ndarray
    b: np.ndarray
    C: float
    standardizer: Standardizer
    kernel: str = "linear"
    validation_crr: dict = field(default_factory=dict)

    @property
    def n_classifiers(self) -> int:
        return len(self.pairs)

    def decisions(self, x) -> np.ndarray:
        """Pairwise decision values ``(n_samples, n_pairs)``; positive favours the first class."""
        z = self.standardizer.apply(_flatten(x))
        return z @ self.W.T + self.b


def _flatten(x):
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    return x.reshape(x.shape[0], -1) if x.ndim > 2 else x


def _fit_pairs(z, y, classes, C, tol):
    pairs, ws, bs = [], [], []
    for a, b in combinations(range(len(classes)), 2):
        mask = (y == classes[a]) | (y == classes[b])
        yy = np.where(y[mask] == classes[a], 1.0, -1.0)
        svm = fit_binary_svm(z[mask], yy, C, tol)
        pairs.append((a, b))
        ws.append(svm.w)
        bs.append(svm.b)
    return pairs, np.array(ws), np.array(bs)


def fit_svm(x_train, y_train, x_val=None, y_val=None, C_grid=C_GRID, tol: float = 1e-6) -> SvmModel:
    """One-vs-one linear SVMs on z-scored features; ``C`` picked by validation CRR.

    Ties in validation CRR go to the smaller ``C``. Without a validation
    set the first grid value is used.
    """
    x_train = _flatten(x_train)
    y_train = np.asarray(y_train)
    classes = np.unique(y_train)
    if len(classes) < 2:
        raise ArgumentError("SVM needs at least two classes")
    std = fit_standardizer(x_train)
    z = std.apply(x_train)
    grid = list(C_grid) if x_val is not None else list(C_grid)[:1]
    best, scores = None, {}
    for C in grid:
        pairs, W, b = _fit_pairs(z, y_train, classes, C, tol)
        model = SvmModel(classes, pairs, W, b, C, std)
        if x_val is None:
            return model
        crr = 100.0 * float(np.mean(predict_svm(model, x_val) == np.asarray(y_val)))
        scores[C] = crr
        if best is None or crr > scores[best.C]:
            best = model
    best.validation_crr = scores
    return best


def vote(decisions: np.ndarray, pairs, n_classes: int):
    """Votes and summed signed margins per class for one-vs-one decisions."""
    decisions = np.atleast_2d(decisions)
    votes = np.zeros((decisions.shape[0], n_classes), dtype=np.int64)
    margin = np.zeros((decisions.shape[0], n_classes))
    for k, (a, b) in enumerate(pairs):
        f = decisions[:, k]
        votes[:, a] += f > 0
        votes[:, b] += f <= 0
        margin[:, a] += f
        margin[:, b] -= f
    return votes, margin


def predict_svm(model: SvmModel, x) -> np.ndarray:
    """Majority vote; ties go to the smallest summed margin deficit, then lowest class."""
    x = _flatten(x)
    votes, margin = vote(model.decisions(x), model.pairs, len(model.classes))
    out = np.empty(len(x), dtype=model.classes.dtype)
    for m in range(len(x)):
        tied = np.flatnonzero(votes[m] == votes[m].max())
        # deficit = -margin; the first index of the minimum is the lowest class id
        out[m] = model.classes[tied[np.argmin(-margin[m, tied])]]
    return out


def hinge_violations(model: SvmModel, x, y) -> int:
    """Training points inside or beyond the margin (y f < 1), over all pairwise classifiers."""
    d = model.decisions(x)
    y = np.asarray(y)
    count = 0
    for k, (a, b) in enumerate(model.pairs):
        mask = (y == model.classes[a]) | (y == model.classes[b])
        yy = np.where(y[mask] == model.classes[a], 1.0, -1.0)
        count += int(np.sum(yy * d[mask, k] < 1 - 1e-9))
    return count


# -- Mahalanobis -----------------------------------------------------------

@dataclass
class MahalanobisModel:
    classes: np.ndarray
    means: np.ndarray       # (K, E, D)
    inv_cov: np.ndarray     # (E, D, D)
    kind: str = "PSD"
    ridge: np.ndarray = None


def _elements(x):
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.ndim == 2:
        x = x[:, None, :]
    return x


def fit_mahalanobis(x_train, y_train, kind: str = "PSD", ridge_scale: float = 1e-6) -> MahalanobisModel:
    """Per-element class means and inverse pooled covariance.

    The pooled covariance is the mean of the per-class unbiased
    covariances, regularised by ``ridge_scale * trace / dim`` on the
    diagonal. ``x_train`` is ``(n, E, D)`` (or ``(n, D)`` for one element).
    """
    x = _elements(x_train)
    y = np.asarray(y_train)
    classes = np.unique(y)
    n, e, d = x.shape
    means = np.empty((len(classes), e, d))
    pooled = np.zeros((e, d, d))
    for k, c in enumerate(classes):
        xc = x[y == c]
        if len(xc) < 2:
            raise FitError(f"class {c} has {len(xc)} training samples; need at least 2")
        means[k] = xc.mean(axis=0)
        centred = xc - means[k]
        pooled += np.einsum("nei,nej->eij", centred, centred) / (len(xc) - 1)
    pooled /= len(classes)
    lam = ridge_scale * np.trace(pooled, axis1=1, axis2=2) / d
    lam = np.where(lam > 0, lam, ridge_scale)
    reg = pooled + lam[:, None, None] * np.eye(d)
    try:
        chol = np.linalg.cholesky(reg)
    except np.linalg.LinAlgError:
        raise FitError("pooled covariance is singular even after ridge regularisation") from None
    eye = np.broadcast_to(np.eye(d), reg.shape)
    linv = np.linalg.solve(chol, eye)
    inv = np.einsum("eki,ekj->eij", linv, linv)
    return MahalanobisModel(classes, means, inv, kind, lam)


def mahalanobis_scores(model: MahalanobisModel, x, chunk: int = 32) -> np.ndarray:
    """Fused score per class: the sum over elements of (o - mu) S^-1 (o - mu)'. ``(n, K)``."""
    x = _elements(x)
    if x.shape[1:] != model.means.shape[1:]:
        raise ShapeError(f"features {x.shape[1:]} do not match model {model.means.shape[1:]}")
    out = np.empty((len(x), len(model.classes)))
    for s in range(0, len(x), chunk):
        diff = x[s:s + chunk, None] - model.means[None]          # (m, K, E, D)
        proj = np.einsum("mked,edf->mkef", diff, model.inv_cov)
        out[s:s + chunk] = np.einsum("mkef,mkef->mk", proj, diff)
    return out


def classify_mahalanobis(model: MahalanobisModel, x) -> tuple[np.ndarray, np.ndarray]:
    """Predicted class (argmin fused distance, lowest class on ties) and the fused scores."""
    scores = mahalanobis_scores(model, x)
    return model.classes[np.argmin(scores, axis=1)], scores
