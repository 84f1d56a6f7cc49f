"""Band filtering, re-referencing, z-scoring and Welch spectral estimates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .errors import ArgumentError, DesignError, FitError, ShapeError

FS = 128.0


@dataclass(frozen=True)
class BandSpec:
    name: str
    low_hz: float
    high_hz: float

    def validate(self, fs: float = FS) -> None:
        if not 0.0 < self.low_hz < self.high_hz < fs / 2:
            raise ArgumentError(f"band {self.name} [{self.low_hz}, {self.high_hz}] invalid for fs={fs}")


BANDS = {
    "theta": BandSpec("theta", 4.0, 8.0),
    "alpha": BandSpec("alpha", 8.0, 15.0),
    "beta": BandSpec("beta", 15.0, 32.0),
    "gamma": BandSpec("gamma", 32.0, 40.0),
    "all": BandSpec("all", 4.0, 40.0),
}


def get_band(band) -> BandSpec:
    if isinstance(band, BandSpec):
        return band
    try:
        return BANDS[str(band).lower()]
    except KeyError:
        raise ArgumentError(f"unknown band {band!r}; expected one of {sorted(BANDS)}") from None


@dataclass(frozen=True)
class FilterCoeffs:
    """Cascade of biquads. ``sos`` rows are ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    order: int
    band: BandSpec
    fs: float

    @property
    def sections(self) -> list[tuple[float, float, float, float, float]]:
        return [(b0, b1, b2, a1, a2) for b0, b1, b2, _, a1, a2 in self.sos.tolist()]

    def poles(self) -> np.ndarray:
        return np.concatenate([np.roots([1.0, a1, a2]) for *_, a1, a2 in self.sections])

    def to_dict(self) -> dict:
        return {"kind": "butterworth-bandpass", "order": self.order, "band": self.band.name,
                "low_hz": self.band.low_hz, "high_hz": self.band.high_hz, "fs": self.fs,
                "sections": self.sections}


def design_butterworth_bandpass(order: int, band, fs: float = FS) -> FilterCoeffs:
    """Digital Butterworth bandpass (bilinear, pre-warped) as second-order sections.

    ``order`` is the prototype order; the bandpass has ``2 * order`` poles.
    """
    band = get_band(band)
    if not 2 <= order <= 8:
        raise ArgumentError(f"order must be in [2, 8], got {order}")
    band.validate(fs)
    sos = sps.butter(order, [band.low_hz, band.high_hz], btype="bandpass", fs=fs, output="sos")
    coeffs = FilterCoeffs(np.asarray(sos, dtype=np.float64), order, band, float(fs))
    if not np.all(np.abs(coeffs.poles()) < 1.0 - 1e-12):
        raise DesignError(f"unstable design for order {order}, band {band.name}")
    return coeffs


def frequency_response(coeffs: FilterCoeffs, freqs_hz) -> np.ndarray:
    """Complex response of the cascade at the given frequencies."""
    z = np.exp(-2j * np.pi * np.asarray(freqs_hz, dtype=float) / coeffs.fs)
    h = np.ones_like(z)
    for b0, b1, b2, a1, a2 in coeffs.sections:
        h *= (b0 + b1 * z + b2 * z * z) / (1.0 + a1 * z + a2 * z * z)
    return h


def filter_signal(x, coeffs: FilterCoeffs) -> np.ndarray:
    """Zero-phase (forward-backward) filtering along the last axis."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n <= 6 * coeffs.order:
        raise ArgumentError(f"signal of {n} samples too short for order {coeffs.order}")
    padlen = min(3 * (2 * len(coeffs.sos) + 1), n - 1)
    return sps.sosfiltfilt(coeffs.sos, x, axis=-1, padlen=padlen)


def common_average_reference(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ShapeError(f"expected (channels >= 2, samples), got {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_standardizer(train) -> Standardizer:
    """Per-column mean and unbiased standard deviation of the training rows."""
    train = np.asarray(train, dtype=np.float64)
    if train.ndim == 1:
        train = train[:, None]
    if train.shape[0] < 2:
        raise FitError("need at least 2 training rows to estimate a standard deviation")
    mean = train.mean(axis=0)
    std = train.std(axis=0, ddof=1)
    bad = np.flatnonzero(~(std > 0))
    if bad.size:
        raise FitError(f"feature {int(bad[0])} has zero variance in the training set")
    return Standardizer(mean, std)


def apply_standardizer(s: Standardizer, x) -> np.ndarray:
    return s.apply(x)


# -- spectra ---------------------------------------------------------------

def _segments(x: np.ndarray, seg_len: int, overlap: int) -> np.ndarray:
    """Overlapping segments along the last axis: ``(..., n_seg, seg_len)``."""
    n = x.shape[-1]
    if n < seg_len:
        raise ArgumentError(f"signal of {n} samples shorter than segment length {seg_len}")
    if not 0 <= overlap < seg_len:
        raise ArgumentError(f"overlap must be in [0, {seg_len}), got {overlap}")
    step = seg_len - overlap
    starts = np.arange(0, n - seg_len + 1, step)
    return np.stack([x[..., s:s + seg_len] for s in starts], axis=-2)


def _segment_spectra(x, fs, nfft, seg_len, overlap, window):
    x = np.asarray(x, dtype=np.float64)
    win = sps.get_window(window, seg_len)
    segs = _segments(x, seg_len, overlap)
    spec = np.fft.rfft(segs * win, n=nfft, axis=-1)
    # density scaling; the one-sided doubling is applied by the callers
    scale = 1.0 / (fs * np.sum(win ** 2))
    return spec, scale


def _one_sided(p: np.ndarray, nfft: int) -> np.ndarray:
    p = p.copy()
    stop = None if nfft % 2 else -1
    p[..., 1:stop] *= 2.0
    return p


def welch_psd(x, fs: float = FS, nfft: int = 128, seg_len: int = 128, overlap: int = 64,
              window: str = "hamming") -> np.ndarray:
    """One-sided Welch PSD (units^2/Hz), ``nfft // 2 + 1`` bins; works on ``(..., T)``."""
    spec, scale = _segment_spectra(x, fs, nfft, seg_len, overlap, window)
    p = (np.abs(spec) ** 2).mean(axis=-2) * scale
    return _one_sided(p, nfft)


def psd_frequencies(fs: float = FS, nfft: int = 128) -> np.ndarray:
    return np.fft.rfftfreq(nfft, 1.0 / fs)


def spectral_coherence(x, y, fs: float = FS, nfft: int = 128, seg_len: int = 128,
                       overlap: int = 64, window: str = "hamming") -> np.ndarray:
    """Magnitude-squared coherence over the Welch segments; 0 where either power is 0."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"x {x.shape} and y {y.shape} differ")
    sx, _ = _segment_spectra(x, fs, nfft, seg_len, overlap, window)
    sy, _ = _segment_spectra(y, fs, nfft, seg_len, overlap, window)
    if sx.shape[-2] < 2:
        raise ArgumentError("coherence needs at least 2 segments")
    sxy = (np.conj(sx) * sy).mean(axis=-2)
    pxx = (np.abs(sx) ** 2).mean(axis=-2)
    pyy = (np.abs(sy) ** 2).mean(axis=-2)
    return _msc(sxy, pxx, pyy)


def _msc(sxy, pxx, pyy):
    denom = pxx * pyy
    out = np.zeros(np.broadcast(sxy, denom).shape)
    ok = denom > 0
    out[ok] = (np.abs(sxy) ** 2)[ok] / denom[ok]
    return np.clip(out, 0.0, 1.0)


def coherence_pairs(x, fs: float = FS, nfft: int = 128, seg_len: int = 128, overlap: int = 64,
                    window: str = "hamming") -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Coherence for every channel pair ``i < j`` of ``x`` (C x T): ``(n_pairs, bins)``."""
    x = np.asarray(x, dtype=np.float64)
    spec, _ = _segment_spectra(x, fs, nfft, seg_len, overlap, window)
    if spec.shape[-2] < 2:
        raise ArgumentError("coherence needs at least 2 segments")
    n_ch = x.shape[0]
    ii, jj = np.triu_indices(n_ch, k=1)
    power = (np.abs(spec) ** 2).mean(axis=1)
    cross = (np.conj(spec[ii]) * spec[jj]).mean(axis=1)
    return _msc(cross, power[ii], power[jj]), list(zip(ii.tolist(), jj.tolist()))


def make_preprocessor(band, order: int = 4, fs: float = FS, car: bool = True):
    """Trial preprocessing used by the experiments: band filter, then CAR."""
    coeffs = design_butterworth_bandpass(order, band, fs)

    def run(x):
        y = filter_signal(x, coeffs)
        return common_average_reference(y) if car else y

    run.coeffs = coeffs
    return run
