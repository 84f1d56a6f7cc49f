"""End-to-end acceptance checks; each one records a single PASS/FAIL line."""

import json
import math
import os
import time
from importlib import resources

import numpy as np
import pytest

from neurobit import baselines as bl
from neurobit import data_io, harness, mesh
from neurobit import signal_prep as sp
from neurobit.nn import gradcheck
from neurobit.nn.network import Network, NetworkConfig, TrainConfig, Trainer, param_count
from neurobit.nn.network import recurrent_param_count
from neurobit.nn.recurrent import GRULayer, LSTMLayer, gru_step, lstm_step

from test_harness import check_plan, fake_subsamples
from test_nn import (_gru_params, _lstm_params, _zero_gru, _zero_lstm, naive_conv, scalar_gru,
                     scalar_lstm)
from test_signal_prep import butterworth_magnitude, periodogram_oracle

CONFIG_DIR = resources.files("neurobit") / "configs"


def test_1_gradient_suite(acceptance):
    t0 = time.perf_counter()
    worst = {}
    for seed in range(100):
        kind = gradcheck.LAYER_KINDS[seed % len(gradcheck.LAYER_KINDS)]
        err = max(gradcheck.random_case(kind, seed).values())
        worst[kind] = max(worst.get(kind, 0.0), err)
    secs = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-5 and secs < 60
    acceptance(1, ok, f"100 cases, worst rel err {max(worst.values()):.2e} (< 1e-5), {secs:.1f} s (< 60 s)")
    assert ok, (worst, secs)


def test_2_oracle_equivalence(acceptance):
    rng = np.random.default_rng(2)
    errs = {}
    x, k = rng.standard_normal((9, 9, 2)), rng.standard_normal((3, 3, 2, 3))
    from neurobit.nn.layers import conv2d_forward
    errs["conv"] = np.abs(conv2d_forward(x[None], k)[0] - naive_conv(x, k)).max()
    e_gru = e_lstm = 0.0
    for _ in range(20):
        p = _gru_params(rng, 2, 2)
        xv, h = rng.standard_normal(2), rng.standard_normal(2)
        e_gru = max(e_gru, np.abs(gru_step(xv, h, p) - scalar_gru(xv.tolist(), h.tolist(), p)).max())
        q = _lstm_params(rng, 2, 2)
        c = rng.standard_normal(2)
        h1, c1 = lstm_step(xv, h, c, q)
        h2, c2 = scalar_lstm(xv.tolist(), h.tolist(), c.tolist(), q)
        e_lstm = max(e_lstm, np.abs(h1 - h2).max(), np.abs(c1 - c2).max())
    errs["gru"], errs["lstm"] = e_gru, e_lstm
    errs["welch"] = max(np.abs(sp.welch_psd(s) - periodogram_oracle(s)).max()
                        for s in rng.standard_normal((5, 1280)))
    model = bl.MahalanobisModel(
        np.array([0, 1]), np.array([[[0.0, 0.0], [1.0, 1.0]], [[2.0, 0.0], [0.0, -1.0]]]),
        np.array([[[2.0, 0.0], [0.0, 1.0]], [[1.0, 0.5], [0.5, 1.0]]]))
    _, scores = bl.classify_mahalanobis(model, np.array([[[1.0, 1.0], [1.0, 0.0]]]))
    errs["mahalanobis"] = np.abs(scores - [[4.0, 6.0]]).max()
    tol = {"conv": 1e-12, "gru": 1e-12, "lstm": 1e-12, "welch": 1e-12, "mahalanobis": 1e-10}
    ok = all(errs[key] <= tol[key] for key in tol)
    acceptance(2, ok, ", ".join(f"{key} {errs[key]:.1e}" for key in tol))
    assert ok, errs


def test_3_recurrent_analytics(acceptance):
    rng = np.random.default_rng(3)
    h = rng.standard_normal(4) * 3
    gru_ok = np.array_equal(gru_step(rng.standard_normal(2), h, _zero_gru(2, 4)), 0.5 * h)
    v = rng.standard_normal(4) * 3
    hl, cl = lstm_step(np.zeros(2), np.zeros(4), v, _zero_lstm(2, 4))
    lstm_ok = np.array_equal(hl, 0.5 * np.tanh(0.5 * v)) and np.array_equal(cl, 0.5 * v)
    ok = gru_ok and lstm_ok
    acceptance(3, ok, f"GRU h = 0.5 h_prev exact: {gru_ok}; LSTM h = 0.5 tanh(0.5 c_prev) exact: {lstm_ok}")
    assert ok


def test_4_parameter_accounting(acceptance):
    checks = []
    for d, n in [(2, 3), (32, 16), (16, 8)]:
        g, l = recurrent_param_count("GRU", d, n), recurrent_param_count("LSTM", d, n)
        rng = np.random.default_rng(0)
        layer_g = sum(v.size for v in GRULayer(d, n, rng).params.values())
        layer_l = sum(v.size for v in LSTMLayer(d, n, rng).params.values())
        checks.append(g == layer_g == 3 * (d * n + n * n) and l == layer_l == 4 * (d * n + n * n) + 3 * n
                      and g < l)
    for kind in ("GRU", "LSTM"):
        for conv, units in [([128, 64, 32], [32, 16]), ([16, 8], [16, 8]), ([128], [64, 32])]:
            cfg = NetworkConfig(conv_filters=conv, recurrent_units=units, recurrent_kind=kind, n_classes=32)
            checks.append(param_count(cfg) == Network(cfg).n_params())
    ok = all(checks)
    acceptance(4, ok, f"{sum(checks)}/{len(checks)} closed-form counts match; GRU(2,3)=45, LSTM(2,3)=69")
    assert ok


@pytest.mark.slow
def test_5_synthetic_end_to_end(acceptance):
    cfg = harness.load_config(CONFIG_DIR / "synthetic_small.json")
    s = cfg.data["synthetic"]
    recs = data_io.generate_synthetic_dataset(s["n_subjects"], s["n_trials_per_state"], s["seed"])
    t0 = time.perf_counter()
    rep = harness.run_experiment(cfg, recs)
    minutes = (time.perf_counter() - t0) / 60
    epochs = [len(c) for c in rep.loss_curves]
    ok = (rep.n_subjects == 8 and len(rep.fold_crr) == 10 and rep.mean_crr >= 95.0
          and max(epochs) <= 200 and minutes <= 15.0)
    acceptance(5, ok, f"mean CRR {rep.mean_crr:.2f} +/- {rep.se_crr:.2f} % (>= 95), "
                      f"epochs/fold {min(epochs)}-{max(epochs)} (<= 200), {minutes:.1f} min (<= 15)")
    assert ok, (rep.fold_crr, epochs, minutes)


@pytest.mark.slow
def test_6_gru_faster_than_lstm(acceptance):
    cfg = harness.load_config(CONFIG_DIR / "synthetic_small.json")
    s = cfg.data["synthetic"]
    recs = data_io.generate_synthetic_dataset(s["n_subjects"], s["n_trials_per_state"], s["seed"])
    subs, _ = harness.prepare_subsamples(cfg, recs)
    plan = harness.make_folds(subs, cfg.seeds.folds)
    x = mesh.encode_array(np.stack([q.data for q in subs]), mesh.build_standard_layout(),
                          mesh.electrode_set(cfg.electrodes))
    y = np.array([q.subject_id - 1 for q in subs])
    wins, lines = 0, []
    for rep in range(10):
        tr, _, _ = plan.split(subs, rep)
        trainers = {}
        for kind in ("cnn-gru", "cnn-lstm"):
            model = harness.ModelSpec(kind=kind, conv_filters=cfg.model.conv_filters,
                                      recurrent_units=cfg.model.recurrent_units)
            net = Network(model.network_config(8), seed=100 + rep)
            trainers[kind] = Trainer(net, x[tr], y[tr], TrainConfig(seed=100 + rep, max_epochs=200),
                                     stop_loss=0.1)
        # alternate epochs, and which model goes first, so both see the same machine load
        order = list(trainers.values())
        while not all(t.done for t in order):
            for t in order:
                if not t.done:
                    t.step()
            order.reverse()
        g, l = trainers["cnn-gru"].hist, trainers["cnn-lstm"].hist
        n = min(len(g.epoch_time), len(l.epoch_time))
        tg, tl = float(np.median(g.epoch_time[:n])), float(np.median(l.epoch_time[:n]))
        eg, el = len(g.train_loss), len(l.train_loss)
        reached = g.train_loss[-1] < 0.1
        win = reached and tg <= tl and eg <= el
        wins += win
        lines.append(f"rep {rep}: GRU {eg} ep {tg:.3f} s/ep, LSTM {el} ep {tl:.3f} s/ep -> {win}")
    print("\n".join(lines))
    ok = wins >= 8
    acceptance(6, ok, f"GRU faster per epoch and to loss 0.1 in {wins}/10 repetitions (>= 8)")
    assert ok, lines


def test_7_filter_suite(acceptance):
    edge_err, stop_db, lag_ok = 0.0, -np.inf, True
    rng = np.random.default_rng(7)
    for name, band in sp.BANDS.items():
        c = sp.design_butterworth_bandpass(4, name)
        for f in (band.low_hz, band.high_hz):
            db = 20 * np.log10(abs(sp.frequency_response(c, f)))
            edge_err = max(edge_err, abs(db + 3.0103))
            assert abs(db - 20 * np.log10(butterworth_magnitude(f, 4, band.low_hz, band.high_hz))) < 1e-8
        # twice the upper edge, capped at Nyquist where the design has its zero
        f2 = min(2 * band.high_hz, sp.FS / 2)
        stop_db = max(stop_db, 20 * np.log10(max(abs(sp.frequency_response(c, f2)), 1e-300)))
        x = sp.filter_signal(rng.standard_normal((1, 4096)), c)[0]
        yy = sp.filter_signal(x[None], c)[0]
        xc = np.correlate(yy - yy.mean(), x - x.mean(), mode="full")
        lag_ok &= int(np.argmax(xc)) - (len(x) - 1) == 0
    ok = edge_err <= 0.5 and stop_db < -40 and lag_ok
    acceptance(7, ok, f"edge |dB + 3.01| max {edge_err:.2e} (<= 0.5), worst at 2x upper edge "
                      f"{stop_db:.1f} dB (< -40), zero lag {lag_ok}")
    assert ok


def test_8_fold_plan_suite(acceptance, synthetic8):
    subs = data_io.select_trials_and_subsample(synthetic8, "ALL", 5, seed=1)
    check_plan(subs, harness.make_folds(subs, seed=2))
    ratings = dict(enumerate(data_io.generate_deap_shaped_ratings(32, seed=8), start=1))
    n_groups = 0
    for state in ("ALL", "LL", "LH", "HL", "HH"):
        fake = fake_subsamples(data_io.select_trials(ratings, state, 5, seed=9))
        plan = harness.make_folds(fake, seed=10)
        check_plan(fake, plan)
        n_groups += len(plan.groups)
    acceptance(8, True, f"disjoint, 2 tests per trial, all subjects per fold, 18/6/6 on synthetic "
                        f"(32 groups) and DEAP-shaped ratings ({n_groups} groups)")


def test_9_baseline_sanity(acceptance):
    rng = np.random.default_rng(9)
    centres = rng.standard_normal((32, 6)) * 8
    x = np.concatenate([c + 0.3 * rng.standard_normal((4, 6)) for c in centres])
    y = np.repeat(np.arange(32), 4)
    model = bl.fit_svm(x, y, C_grid=(1.0,))
    svm_acc = 100 * np.mean(bl.predict_svm(model, x) == y)
    cov = np.array([[1.0, 0.6], [0.6, 2.0]])
    L = np.linalg.cholesky(cov)
    mu = np.array([[0.0, 0.0], [1.5, 0.5]])

    def draw(n):
        return np.vstack([m + rng.standard_normal((n, 2)) @ L.T for m in mu]), np.repeat([0, 1], n)

    xt, yt = draw(500)
    xe, ye = draw(50_000)
    pred, _ = bl.classify_mahalanobis(bl.fit_mahalanobis(xt, yt), xe)
    acc = 100 * np.mean(pred == ye)
    diff = mu[1] - mu[0]
    bayes = 100 * 0.5 * (1 + math.erf(math.sqrt(diff @ np.linalg.solve(cov, diff)) / 2 / math.sqrt(2)))
    ok = model.n_classifiers == 496 and svm_acc == 100.0 and abs(acc - bayes) < 2.0
    acceptance(9, ok, f"{model.n_classifiers} SVM pairs, separable accuracy {svm_acc:.1f} %, "
                      f"Mahalanobis {acc:.2f} % vs Bayes {bayes:.2f} %")
    assert ok


@pytest.mark.slow
def test_10_deap_reproduction(acceptance):
    path = os.environ.get("NEUROBIT_DEAP_EXPORT")
    if not path:
        acceptance(10, None, "no DEAP export (set NEUROBIT_DEAP_EXPORT to run)")
        pytest.skip("NEUROBIT_DEAP_EXPORT not set")
    recs, manifest = data_io.load_export(path)
    names = manifest.channel_names
    gru = harness.load_config(CONFIG_DIR / "exp1_all_cnn_gru.json")
    svm = harness.load_config(CONFIG_DIR / "exp1_all_svm_psd.json")
    r_gru = harness.run_experiment(gru, recs, channel_names=names)
    r_svm = harness.run_experiment(svm, recs, channel_names=names)
    ok = r_gru.mean_crr >= 99.0 and r_svm.mean_crr < 60.0
    acceptance(10, ok, f"CNN-GRU {r_gru.mean_crr:.2f} % (>= 99), SVM-PSD {r_svm.mean_crr:.2f} % (< 60)")
    print(json.dumps([r_gru.to_dict(), r_svm.to_dict()])[:2000])
    assert ok
