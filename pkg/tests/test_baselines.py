import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from neurobit import baselines as bl
from neurobit import checkpoint
from neurobit.errors import ArgumentError, FitError, LoadError, ShapeError


def blobs(rng, k, n, d, sep=6.0, noise=1.0):
    centres = rng.standard_normal((k, d)) * sep
    x = np.concatenate([c + noise * rng.standard_normal((n, d)) for c in centres])
    return x, np.repeat(np.arange(k), n)


# ---------------------------------------------------------------- features

def test_feature_shapes():
    x = np.random.default_rng(0).standard_normal((32, 1280))
    psd = bl.extract_psd_features(x)
    assert psd.kind == "PSD" and psd.values.shape == (32, 65) and psd.n_elements == 32
    coh = bl.extract_coh_features(x)
    assert coh.kind == "COH" and coh.n_elements == 496
    beta = bl.extract_coh_features(x, band="beta")
    assert beta.n_elements == 496 and beta.values.shape[1] < coh.values.shape[1]
    assert np.all(np.isfinite(psd.values)) and np.all(np.isfinite(coh.values))
    np.testing.assert_array_equal(bl.extract_psd_features(x).values, psd.values)


def test_identical_channels_hit_coherence_ceiling():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 1280))
    x[1] = x[0]
    v = bl.extract_coh_features(x).values
    # pair order (0,1), (0,2), (1,2)
    np.testing.assert_allclose(v[0], np.arctanh(bl.COH_CEIL))
    assert np.all(v[1] < np.arctanh(bl.COH_CEIL))


def test_constant_channel_uses_log_floor():
    x = np.random.default_rng(2).standard_normal((2, 1280))
    x[1] = 0.0
    v = bl.extract_psd_features(x).values
    np.testing.assert_array_equal(v[1], np.log(bl.PSD_FLOOR))


def test_feature_shape_error():
    with pytest.raises(ShapeError):
        bl.extract_psd_features(np.zeros(100))


# ---------------------------------------------------------------- SVM

def test_pairwise_classifier_count():
    rng = np.random.default_rng(3)
    x, y = blobs(rng, 32, 3, 4)
    model = bl.fit_svm(x, y)
    assert model.n_classifiers == 496 == 32 * 31 // 2
    votes, _ = bl.vote(model.decisions(x), model.pairs, 32)
    assert np.all(votes.sum(1) == 496)


@pytest.mark.parametrize("C", [1.0, 10.0, 100.0])
def test_separable_blobs_fully_classified(C):
    rng = np.random.default_rng(4)
    x, y = blobs(rng, 2, 40, 5, sep=5.0, noise=0.3)
    model = bl.fit_svm(x, y, C_grid=(C,))
    assert np.all(bl.predict_svm(model, x) == y)


def test_hinge_violations_non_increasing_in_C():
    rng = np.random.default_rng(5)
    x, y = blobs(rng, 3, 40, 4, sep=1.0, noise=1.0)
    counts = [bl.hinge_violations(bl.fit_svm(x, y, C_grid=(C,)), x, y) for C in bl.C_GRID]
    assert all(a >= b for a, b in zip(counts, counts[1:])), counts
    assert counts[0] > counts[-1]


def test_binary_svm_kkt_and_objective():
    rng = np.random.default_rng(6)
    x, y01 = blobs(rng, 2, 30, 3, sep=1.0)
    y = np.where(y01 == 0, 1.0, -1.0)
    C = 1.0
    svm = bl.fit_binary_svm(x, y, C, tol=1e-9)
    assert np.all(svm.alpha >= 0) and np.all(svm.alpha <= C)
    assert abs(svm.alpha @ y) < 1e-9
    f = y * svm.decision(x)
    # complementary slackness within tolerance
    assert np.all(f[svm.alpha < 1e-9] >= 1 - 1e-6)
    assert np.all(f[svm.alpha > C - 1e-9] <= 1 + 1e-6)
    # strong duality: primal == dual
    primal = 0.5 * svm.w @ svm.w + C * np.maximum(0, 1 - f).sum()
    Q = np.outer(y, y) * (x @ x.T)
    dual = svm.alpha.sum() - 0.5 * svm.alpha @ Q @ svm.alpha
    assert primal == pytest.approx(dual, rel=1e-6)


def test_binary_svm_matches_reference_solver():
    svm_mod = pytest.importorskip("sklearn.svm")
    rng = np.random.default_rng(7)
    x, y01 = blobs(rng, 2, 40, 4, sep=1.5)
    y = np.where(y01 == 0, 1.0, -1.0)
    for C in (0.1, 1.0, 10.0):
        ours = bl.fit_binary_svm(x, y, C, tol=1e-10)
        ref = svm_mod.SVC(kernel="linear", C=C, tol=1e-10).fit(x, y)
        np.testing.assert_allclose(ours.w, ref.coef_[0], atol=1e-5)
        assert ours.b == pytest.approx(ref.intercept_[0], abs=1e-5)


def test_duplicate_point_keeps_separable_margin():
    rng = np.random.default_rng(8)
    x, y01 = blobs(rng, 2, 20, 3, sep=6.0, noise=0.5)
    y = np.where(y01 == 0, 1.0, -1.0)
    a = bl.fit_binary_svm(x, y, 1e4, tol=1e-12)
    b = bl.fit_binary_svm(np.vstack([x, x[:1]]), np.append(y, y[0]), 1e4, tol=1e-12)
    assert 1 / np.linalg.norm(a.w) == pytest.approx(1 / np.linalg.norm(b.w), abs=1e-8)
    np.testing.assert_allclose(a.w, b.w, atol=1e-7)


def test_two_class_vote_is_sign():
    rng = np.random.default_rng(9)
    x, y = blobs(rng, 2, 20, 3, sep=1.0)
    model = bl.fit_svm(x, y)
    pred = bl.predict_svm(model, x)
    np.testing.assert_array_equal(pred, np.where(model.decisions(x)[:, 0] > 0, 0, 1))


def test_three_class_majority():
    pairs = [(0, 1), (0, 2), (1, 2)]
    votes, _ = bl.vote(np.array([[1.0, 1.0, 1.0]]), pairs, 3)
    np.testing.assert_array_equal(votes[0], [2, 1, 0])


def vote_oracle(dec, pairs, n):
    """Plain-python one-vs-one vote with margin-deficit and lowest-id tie breaks."""
    out = []
    for row in dec:
        votes, margin = [0] * n, [0.0] * n
        for f, (a, b) in zip(row, pairs):
            if f > 0:
                votes[a] += 1
            else:
                votes[b] += 1
            margin[a] += f
            margin[b] -= f
        best = max(votes)
        tied = [c for c in range(n) if votes[c] == best]
        out.append(min(tied, key=lambda c: (-margin[c], c)))
    return out


def test_predict_matches_vote_oracle():
    rng = np.random.default_rng(10)
    x, y = blobs(rng, 4, 25, 5, sep=1.0)
    model = bl.fit_svm(x[::2], y[::2], x[1::2], y[1::2])
    assert model.C in bl.C_GRID and set(model.validation_crr) == set(bl.C_GRID)
    assert model.validation_crr[model.C] == max(model.validation_crr.values())
    np.testing.assert_array_equal(bl.predict_svm(model, x),
                                  vote_oracle(model.decisions(x), model.pairs, 4))


def test_vote_tie_breaks():
    pairs = list(combinations(range(3), 2))
    # cyclic votes: each class gets one vote; class 2 has the largest margin
    dec = np.array([[0.5, -2.0, 0.5]])
    votes, margin = bl.vote(dec, pairs, 3)
    assert list(votes[0]) == [1, 1, 1]
    assert vote_oracle(dec, pairs, 3) == [2]
    model = bl.SvmModel(np.arange(3), pairs, np.zeros((3, 1)), dec[0], 1.0,
                        bl.Standardizer(np.zeros(1), np.ones(1)))
    assert bl.predict_svm(model, np.zeros((1, 1)))[0] == 2


def test_svm_needs_two_classes():
    with pytest.raises(ArgumentError):
        bl.fit_svm(np.zeros((4, 2)), np.zeros(4))


# ---------------------------------------------------------------- Mahalanobis

def test_pooled_covariance_one_dimensional():
    x = np.array([1.0, 2.0, 4.0, 10.0, 13.0, 19.0])[:, None]
    y = np.array([0, 0, 0, 1, 1, 1])
    model = bl.fit_mahalanobis(x, y, ridge_scale=0.0)
    pooled = (np.var([1, 2, 4], ddof=1) + np.var([10, 13, 19], ddof=1)) / 2
    assert 1 / model.inv_cov[0, 0, 0] == pytest.approx(pooled, rel=1e-12)


def test_pooled_covariance_shared_samples():
    rng = np.random.default_rng(11)
    base = rng.standard_normal((50, 3)) @ np.array([[2, 0, 0], [1, 1, 0], [0, 0.5, 0.3]])
    x = np.vstack([base, base + 5.0])
    y = np.repeat([0, 1], 50)
    model = bl.fit_mahalanobis(x, y, ridge_scale=0.0)
    np.testing.assert_allclose(np.linalg.inv(model.inv_cov[0]), np.cov(base.T), atol=1e-10)


def test_mahalanobis_matches_direct_formula():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((30, 4)) * [1, 2, 0.5, 3]
    y = np.repeat([0, 1, 2], 10)
    model = bl.fit_mahalanobis(x, y)
    covs = [np.cov(x[y == c].T) for c in range(3)]
    pooled = sum(covs) / 3
    pooled += 1e-6 * np.trace(pooled) / 4 * np.eye(4)
    inv = np.linalg.inv(pooled)
    q = rng.standard_normal((5, 4))
    expect = np.array([[(o - x[y == c].mean(0)) @ inv @ (o - x[y == c].mean(0)) for c in range(3)]
                       for o in q])
    np.testing.assert_allclose(bl.mahalanobis_scores(model, q), expect, rtol=1e-10, atol=1e-10)


def test_fused_scores_hand_computation():
    # 2 elements x 2 dims, 2 classes, hand-sized means and inverse covariances
    model = bl.MahalanobisModel(
        classes=np.array([0, 1]),
        means=np.array([[[0.0, 0.0], [1.0, 1.0]], [[2.0, 0.0], [0.0, -1.0]]]),
        inv_cov=np.array([[[2.0, 0.0], [0.0, 1.0]], [[1.0, 0.5], [0.5, 1.0]]]))
    o = np.array([[[1.0, 1.0], [1.0, 0.0]]])
    # class 0: e0 diff (1,1) -> 2+1 = 3; e1 diff (0,-1) -> 1; total 4
    # class 1: e0 diff (-1,1) -> 2+1 = 3; e1 diff (1,1) -> 1+0.5+0.5+1 = 3; total 6
    pred, scores = bl.classify_mahalanobis(model, o)
    np.testing.assert_allclose(scores, [[4.0, 6.0]], atol=1e-12)
    assert pred[0] == 0


def test_identity_covariance_is_squared_euclidean():
    model = bl.MahalanobisModel(np.array([0, 1]), np.array([[[0.0, 0.0]], [[3.0, 4.0]]]),
                                np.eye(2)[None])
    _, s = bl.classify_mahalanobis(model, np.array([[0.0, 0.0]]))
    np.testing.assert_allclose(s, [[0.0, 25.0]])


def test_class_mean_query_predicts_class():
    rng = np.random.default_rng(13)
    x, y = blobs(rng, 3, 10, 3)
    model = bl.fit_mahalanobis(x, y)
    pred, scores = bl.classify_mahalanobis(model, model.means[:, 0, :])
    np.testing.assert_array_equal(pred, [0, 1, 2])
    np.testing.assert_allclose(np.diag(scores), 0.0, atol=1e-12)


def test_ties_go_to_lowest_class():
    model = bl.MahalanobisModel(np.array([3, 7]), np.array([[[1.0]], [[-1.0]]]), np.eye(1)[None])
    pred, _ = bl.classify_mahalanobis(model, np.array([[0.0]]))
    assert pred[0] == 3


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_distances_non_negative(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((12, 2, 3))
    y = np.repeat([0, 1, 2], 4)
    scores = bl.mahalanobis_scores(bl.fit_mahalanobis(x, y), rng.standard_normal((6, 2, 3)) * 5)
    assert np.all(scores >= -1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_affine_invariance(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((24, 3))
    y = np.repeat([0, 1, 2], 8)
    q = rng.standard_normal((5, 3))
    A = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    shift = rng.standard_normal(3)
    a = bl.mahalanobis_scores(bl.fit_mahalanobis(x, y, ridge_scale=0.0), q)
    b = bl.mahalanobis_scores(bl.fit_mahalanobis(x @ A.T + shift, y, ridge_scale=0.0), q @ A.T + shift)
    np.testing.assert_allclose(a, b, rtol=1e-8, atol=1e-8)


def test_near_bayes_rate():
    # two Gaussians with shared covariance: Bayes accuracy = Phi(delta / 2)
    rng = np.random.default_rng(14)
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    L = np.linalg.cholesky(cov)
    mu = np.array([[0.0, 0.0], [1.5, 0.5]])

    def draw(n):
        return np.vstack([m + rng.standard_normal((n, 2)) @ L.T for m in mu]), np.repeat([0, 1], n)

    x, y = draw(500)
    xt, yt = draw(20_000)
    pred, _ = bl.classify_mahalanobis(bl.fit_mahalanobis(x, y), xt)
    acc = 100 * np.mean(pred == yt)
    diff = mu[1] - mu[0]
    delta = math.sqrt(diff @ np.linalg.solve(cov, diff))
    bayes = 100 * 0.5 * (1 + math.erf(delta / 2 / math.sqrt(2)))
    assert abs(acc - bayes) < 2.0


def test_mahalanobis_errors():
    with pytest.raises(FitError):
        bl.fit_mahalanobis(np.zeros((3, 2)), np.array([0, 0, 1]))
    model = bl.fit_mahalanobis(np.random.default_rng(0).standard_normal((6, 2)), [0, 0, 0, 1, 1, 1])
    with pytest.raises(ShapeError):
        bl.mahalanobis_scores(model, np.zeros((1, 3)))


def test_ridge_keeps_singular_covariance_invertible():
    # fewer samples than dimensions -> singular pooled covariance before the ridge
    rng = np.random.default_rng(15)
    x = rng.standard_normal((6, 10))
    model = bl.fit_mahalanobis(x, [0, 0, 0, 1, 1, 1])
    assert np.all(np.isfinite(model.inv_cov))
    np.testing.assert_allclose(model.inv_cov[0], model.inv_cov[0].T, atol=1e-6 * np.abs(model.inv_cov).max())


# ---------------------------------------------------------------- checkpoints

def test_svm_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(16)
    x, y = blobs(rng, 3, 10, 4)
    model = bl.fit_svm(x, y)
    back = checkpoint.load_svm(checkpoint.save_svm(tmp_path / "s.ckpt", model))
    assert back.C == model.C and back.pairs == model.pairs
    np.testing.assert_array_equal(bl.predict_svm(back, x), bl.predict_svm(model, x))
    np.testing.assert_allclose(back.decisions(x), model.decisions(x), rtol=1e-5, atol=1e-5)


def test_mahalanobis_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(17)
    x, y = blobs(rng, 3, 10, 4)
    model = bl.fit_mahalanobis(x, y, kind="COH")
    path = checkpoint.save_mahalanobis(tmp_path / "m.ckpt", model)
    back = checkpoint.load_mahalanobis(path)
    assert back.kind == "COH"
    np.testing.assert_array_equal(bl.classify_mahalanobis(back, x)[0], bl.classify_mahalanobis(model, x)[0])
    with pytest.raises(LoadError) as exc:
        checkpoint.load_network(path)
    assert exc.value.field == "kind"
