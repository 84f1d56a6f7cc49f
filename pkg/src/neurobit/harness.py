"""Trial-disjoint cross-validation, experiment drivers, CRR and reporting."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, mesh
from .data_io import ALL, DEAP_CHANNELS, STATES, RawRecording, Subsample
from .data_io import select_trials_and_subsample
from .errors import ArgumentError, FoldError, NeurobitError
from .nn.network import Network, NetworkConfig, TrainConfig, param_count, train
from .signal_prep import get_band, make_preprocessor

logger = logging.getLogger(__name__)

N_FOLDS = 10
TRIALS_PER_GROUP = 5
SPLIT_NOTE = ("trial-disjoint folds: per subject and state, 3/1/1 trials (18/6/6 subsamples) "
              "for train/validation/test, i.e. 60/20/20 rather than 80/10/10, because a "
              "6-subsample trial cannot be split across sets")
NEURAL_KINDS = ("cnn-gru", "cnn-lstm")
BASELINE_KINDS = ("svm-psd", "mahalanobis-psd", "mahalanobis-coh")
MODEL_KINDS = NEURAL_KINDS + BASELINE_KINDS
EXPERIMENTS = ("I", "II", "III", "IV")
# wall-clock fields differ run to run; everything else in a report is reproducible
TIMING_FIELDS = ("epoch_times", "fold_seconds", "total_seconds")


# -- folds -----------------------------------------------------------------

@dataclass(frozen=True)
class FoldPlan:
    """Per (subject, state) group: five trials in seed order.

    Fold ``k`` tests trial ``t = k // 2`` and validates on trial
    ``(t + d) % 5`` with ``d = 1 + k % 2``; the other three trials train.
    """

    groups: dict
    seed: int
    n_folds: int = N_FOLDS

    def assignment(self, k: int) -> dict:
        """``{group: (train_trials, val_trial, test_trial)}`` for fold ``k``."""
        if not 0 <= k < self.n_folds:
            raise ArgumentError(f"fold index must be in [0, {self.n_folds}), got {k}")
        t, d = k // 2, 1 + k % 2
        out = {}
        for key, trials in self.groups.items():
            test, val = trials[t], trials[(t + d) % TRIALS_PER_GROUP]
            out[key] = (tuple(x for x in trials if x not in (test, val)), val, test)
        return out

    def split(self, subsamples: Sequence[Subsample], k: int):
        """Index arrays ``(train, val, test)`` into ``subsamples`` for fold ``k``."""
        plan = self.assignment(k)
        role = {}
        for key, (tr, va, te) in plan.items():
            sid = key[0]
            for tid in tr:
                role[(sid, tid)] = 0
            role[(sid, va)] = 1
            role[(sid, te)] = 2
        parts = ([], [], [])
        for i, s in enumerate(subsamples):
            parts[role[(s.subject_id, s.trial_id)]].append(i)
        return tuple(np.array(p, dtype=np.int64) for p in parts)

    def to_dict(self):
        return {"seed": self.seed, "n_folds": self.n_folds,
                "groups": [{"subject_id": k[0], "state": str(getattr(k[1], "value", k[1])),
                            "trials": list(v)} for k, v in self.groups.items()]}


def make_folds(subsamples: Sequence[Subsample], seed: int) -> FoldPlan:
    """Fold plan over (subject, state) groups of exactly five trials each."""
    trials = {}
    for s in subsamples:
        trials.setdefault((s.subject_id, s.state), set()).add(s.trial_id)
    if not trials:
        raise FoldError("no subsamples to split", fold=None)
    owner = {}
    for (sid, st), tids in trials.items():
        for tid in tids:
            if owner.setdefault((sid, tid), st) != st:
                raise FoldError(f"subject {sid} trial {tid} appears under two states", fold=None)
    rng = np.random.default_rng(seed)
    groups = {}
    for key in sorted(trials, key=lambda k: (k[0], str(getattr(k[1], "value", k[1])))):
        tids = sorted(trials[key])
        if len(tids) != TRIALS_PER_GROUP:
            raise FoldError(f"subject {key[0]} state {getattr(key[1], 'value', key[1])} has "
                            f"{len(tids)} trials; folds need exactly {TRIALS_PER_GROUP}", fold=None)
        groups[key] = tuple(int(t) for t in rng.permutation(tids))
    return FoldPlan(groups, seed)


def compute_crr(predictions, truth) -> float:
    """Correct recognition rate in percent."""
    p, t = np.asarray(predictions), np.asarray(truth)
    if p.shape != t.shape:
        raise ArgumentError(f"predictions {p.shape} and truth {t.shape} differ in shape")
    if p.size == 0:
        raise ArgumentError("cannot compute CRR of an empty set")
    return 100.0 * float(np.count_nonzero(p == t)) / p.size


def mean_se(values) -> tuple[float, float]:
    """Arithmetic mean and standard error (sample SD / sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ArgumentError("no values")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


# -- configuration -----------------------------------------------------------

@dataclass
class ModelSpec:
    kind: str = "cnn-gru"
    conv_filters: list = field(default_factory=lambda: [128, 64, 32])
    recurrent_units: list = field(default_factory=lambda: [32, 16])
    td_dense_units: int = 128
    dropout: float = 0.3

    def __post_init__(self):
        self.kind = str(self.kind).lower()
        if self.kind not in MODEL_KINDS:
            raise ArgumentError(f"model.kind must be one of {MODEL_KINDS}, got {self.kind!r}")
        self.conv_filters = [int(c) for c in self.conv_filters]
        self.recurrent_units = [int(u) for u in self.recurrent_units]

    @property
    def neural(self) -> bool:
        return self.kind in NEURAL_KINDS

    def network_config(self, n_classes: int) -> NetworkConfig:
        return NetworkConfig(conv_filters=self.conv_filters, recurrent_units=self.recurrent_units,
                             recurrent_kind=self.kind.split("-")[1].upper(),
                             td_dense_units=self.td_dense_units, dropout=self.dropout,
                             n_classes=n_classes)


@dataclass
class TrainSpec:
    lr: float = 0.003
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    min_delta: float = 0.0


@dataclass
class Seeds:
    data: int = 0
    folds: int = 0
    init: int = 0


@dataclass
class ExperimentConfig:
    experiment: str = "I"
    state: str = ALL
    band: str = "all"
    electrodes: str = "ALL"
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    seeds: Seeds = field(default_factory=Seeds)
    trials_per_state: int = TRIALS_PER_GROUP
    filter_order: int = 4
    label: str = ""
    data: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelSpec(**self.model)
        if isinstance(self.train, dict):
            self.train = TrainSpec(**self.train)
        if isinstance(self.seeds, dict):
            self.seeds = Seeds(**self.seeds)
        self.experiment = str(self.experiment).upper()
        self.state = str(getattr(self.state, "value", self.state)).upper()
        self.band = get_band(self.band).name
        self.electrodes = mesh.electrode_set(self.electrodes).name
        if not self.label:
            self.label = default_label(self)
        self.validate()

    def validate(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ArgumentError(f"experiment must be one of {EXPERIMENTS}, got {self.experiment!r}")
        if self.state != ALL and self.state not in {s.value for s in STATES}:
            raise ArgumentError(f"unknown state {self.state!r}")
        if self.trials_per_state != TRIALS_PER_GROUP:
            raise ArgumentError(f"the fold plan needs trials_per_state={TRIALS_PER_GROUP}")
        rules = {
            # experiment: (state, band, electrodes) requirements; None = free
            "I": (None, "all", "ALL"),
            "II": (ALL, None, "ALL"),
            "III": (ALL, "all", None),
            "IV": (ALL, "all", "ALL"),
        }
        state, band, elec = rules[self.experiment]
        for name, want, got in (("state", state, self.state), ("band", band, self.band),
                                ("electrodes", elec, self.electrodes)):
            if want is not None and got != want:
                raise ArgumentError(f"experiment {self.experiment} requires {name}={want}, got {got}")
        if self.experiment == "III" and not self.model.neural:
            raise ArgumentError("experiment III compares electrode sets for the neural models only")
        if self.experiment == "IV" and self.model.kind == "svm-psd":
            raise ArgumentError("experiment IV compares the neural models with the Mahalanobis baselines")
        if not self.model.neural and self.electrodes != "ALL":
            raise ArgumentError("baselines use all 32 electrodes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ArgumentError(f"unknown config keys {sorted(extra)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_label(cfg: ExperimentConfig) -> str:
    m = cfg.model
    tag = m.kind
    if m.neural:
        tag += f"[{'-'.join(map(str, m.conv_filters))}|{'-'.join(map(str, m.recurrent_units))}]"
    return f"exp{cfg.experiment}/{cfg.state}/{cfg.band}/{cfg.electrodes}/{tag}"


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return ExperimentConfig.from_dict(json.load(fh))


def expand_sweep(spec: dict) -> list[ExperimentConfig]:
    """Configs for a sweep file: ``base`` merged with each entry of ``variants``.

    A variant's ``model`` keys override the base model; other keys replace
    the base value.
    """
    if "base" not in spec or not spec.get("variants"):
        raise ArgumentError("a sweep needs 'base' and a non-empty 'variants' list")
    out = []
    for v in spec["variants"]:
        d = json.loads(json.dumps(spec["base"]))
        for key, val in v.items():
            if key == "model":
                d.setdefault("model", {}).update(val)
            else:
                d[key] = val
        out.append(ExperimentConfig.from_dict(d))
    return out


# values reported on the full 32-subject DEAP recordings, for side-by-side tables
PUBLISHED_CRR = {
    **{f"expI/{st}/all/ALL/{k}": v for st, row in {
        "LL": (99.90, 99.79, 33.02), "LH": (99.71, 100.0, 36.38), "HL": (99.86, 99.86, 36.25),
        "HH": (99.87, 99.74, 33.59), ALL: (100.0, 99.79, 33.02)}.items()
       for k, v in zip(("cnn-gru", "cnn-lstm", "svm-psd"), row)},
    **{f"expII/{ALL}/{b}/ALL/{k}": v for b, row in {
        "theta": (99.69, 99.69, 98.54), "alpha": (99.58, 99.69, 98.75),
        "beta": (99.90, 99.86, 87.50), "gamma": (100.0, 99.74, 33.54),
        "all": (100.0, 99.79, 33.02)}.items()
       for k, v in zip(("cnn-gru", "cnn-lstm", "svm-psd"), row)},
    f"expIII/{ALL}/all/F/cnn-gru": 99.10,
    f"expIII/{ALL}/all/F/cnn-lstm": 98.23,
    f"expIV/{ALL}/all/ALL/cnn-gru[128|32-16]": 100.0,
    f"expIV/{ALL}/all/ALL/cnn-lstm[128|32-16]": 99.69,
    f"expIV/{ALL}/all/ALL/cnn-gru[128-64|32-16]": 99.90,
    f"expIV/{ALL}/all/ALL/cnn-lstm[128-64|32-16]": 99.69,
    f"expIV/{ALL}/all/ALL/cnn-gru[128-64-32|32-16]": 99.90,
    f"expIV/{ALL}/all/ALL/cnn-lstm[128-64-32|32-16]": 99.90,
    f"expIV/{ALL}/all/ALL/cnn-gru[128-64-32|16-8]": 97.29,
    f"expIV/{ALL}/all/ALL/cnn-lstm[128-64-32|16-8]": 89.58,
    f"expIV/{ALL}/all/ALL/cnn-gru[128-64-32|64-32]": 99.90,
    f"expIV/{ALL}/all/ALL/cnn-lstm[128-64-32|64-32]": 99.79,
    f"expIV/{ALL}/all/ALL/mahalanobis-psd": 47.09,
    f"expIV/{ALL}/all/ALL/mahalanobis-coh": 47.81,
}
PUBLISHED_FOOTNOTES = {
    f"expIII/{ALL}/all/F/cnn-gru": "99.10 from the summary table; the running text quotes 99.17",
}


def published_key(cfg: ExperimentConfig) -> str:
    """Lookup key into ``PUBLISHED_CRR``; empty for synthetic data or off-grid models."""
    m = cfg.model
    if "synthetic" in (cfg.data or {}):
        return ""
    base = f"exp{cfg.experiment}/{cfg.state}/{cfg.band}/{cfg.electrodes}/{m.kind}"
    if cfg.experiment == "IV" and m.neural and m.td_dense_units == 128:
        base += f"[{'-'.join(map(str, m.conv_filters))}|{'-'.join(map(str, m.recurrent_units))}]"
    elif m.neural and (m.conv_filters != [128, 64, 32] or m.recurrent_units != [32, 16]):
        return ""
    return base


# -- reports -------------------------------------------------------------------

@dataclass
class CrrReport:
    label: str
    config: dict
    config_hash: str
    fold_crr: list
    mean_crr: float
    se_crr: float
    n_subjects: int
    n_subsamples: int
    fold_sizes: list
    loss_curves: list = field(default_factory=list)
    val_loss_curves: list = field(default_factory=list)
    best_epochs: list = field(default_factory=list)
    selected_C: list = field(default_factory=list)
    n_params: int | None = None
    layout_digest: str = ""
    filter_design: dict = field(default_factory=dict)
    split_note: str = SPLIT_NOTE
    published_crr: float | None = None
    published_note: str = ""
    epoch_times: list = field(default_factory=list)
    fold_seconds: list = field(default_factory=list)
    total_seconds: float = 0.0

    def to_dict(self, timings: bool = True) -> dict:
        d = asdict(self)
        if not timings:
            for k in TIMING_FIELDS:
                d.pop(k)
        return d

    def to_json(self, timings: bool = True) -> str:
        return json.dumps(self.to_dict(timings), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "CrrReport":
        return cls(**d)

    def recomputed(self) -> tuple[float, float]:
        return mean_se(self.fold_crr)


@dataclass
class _FoldResult:
    crr: float
    sizes: tuple
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    epoch_time: list = field(default_factory=list)
    best_epoch: int = -1
    C: float | None = None
    seconds: float = 0.0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("NEUROBIT_THREADS", "1")))
    except ValueError:
        raise ArgumentError("NEUROBIT_THREADS must be an integer") from None


def prepare_subsamples(cfg: ExperimentConfig, recordings: Sequence[RawRecording]):
    pre = make_preprocessor(cfg.band, order=cfg.filter_order)
    subs = select_trials_and_subsample(recordings, cfg.state, cfg.trials_per_state,
                                       seed=cfg.seeds.data, preprocess=pre)
    return subs, pre.coeffs


def _features(cfg: ExperimentConfig, subs: Sequence[Subsample]) -> np.ndarray:
    kind = cfg.model.kind
    if kind.endswith("coh"):
        return np.stack([baselines.extract_coh_features(s, cfg.band).values for s in subs])
    return np.stack([baselines.extract_psd_features(s).values for s in subs])


def run_experiment(cfg: ExperimentConfig, recordings: Sequence[RawRecording], *,
                   channel_names: Sequence[str] = DEAP_CHANNELS, checkpoint_dir=None,
                   folds: Sequence[int] | None = None) -> CrrReport:
    """Preprocess, encode, and run every fold of the trial-disjoint plan.

    ``folds`` restricts the run to a subset of fold indices (the report
    then averages over those only). A failing fold aborts the run with a
    ``FoldError`` naming it.
    """
    t_start = time.perf_counter()
    subs, coeffs = prepare_subsamples(cfg, recordings)
    plan = make_folds(subs, cfg.seeds.folds)
    subjects = sorted({s.subject_id for s in subs})
    index = {sid: i for i, sid in enumerate(subjects)}
    y = np.array([index[s.subject_id] for s in subs], dtype=np.int64)
    layout = mesh.build_standard_layout(channel_names)
    if cfg.model.neural:
        x = mesh.encode_array(np.stack([s.data for s in subs]), layout,
                              mesh.electrode_set(cfg.electrodes), channel_names)
    else:
        x = _features(cfg, subs)
    fold_ids = list(range(plan.n_folds)) if folds is None else [int(k) for k in folds]
    if checkpoint_dir is not None:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)

    def one(k):
        try:
            return _run_fold(cfg, plan, subs, x, y, len(subjects), k, checkpoint_dir)
        except NeurobitError as exc:
            raise FoldError(f"fold {k} failed: {exc}", fold=k) from exc
        except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
            raise FoldError(f"fold {k} failed: {exc}", fold=k) from exc

    workers = min(_threads(), len(fold_ids))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, fold_ids))
    else:
        results = [one(k) for k in fold_ids]

    crr = [r.crr for r in results]
    mean, se = mean_se(crr)
    key = published_key(cfg)
    n_params = param_count(cfg.model.network_config(len(subjects))) if cfg.model.neural else None
    return CrrReport(
        label=cfg.label, config=cfg.to_dict(), config_hash=cfg.digest(),
        fold_crr=crr, mean_crr=mean, se_crr=se, n_subjects=len(subjects),
        n_subsamples=len(subs), fold_sizes=[list(r.sizes) for r in results],
        loss_curves=[r.train_loss for r in results], val_loss_curves=[r.val_loss for r in results],
        best_epochs=[r.best_epoch for r in results],
        selected_C=[r.C for r in results if r.C is not None],
        n_params=n_params, layout_digest=layout.digest, filter_design=coeffs.to_dict(),
        published_crr=PUBLISHED_CRR.get(key), published_note=PUBLISHED_FOOTNOTES.get(key, ""),
        epoch_times=[r.epoch_time for r in results], fold_seconds=[r.seconds for r in results],
        total_seconds=time.perf_counter() - t_start,
    )


def _run_fold(cfg, plan, subs, x, y, n_classes, k, checkpoint_dir) -> _FoldResult:
    t0 = time.perf_counter()
    tr, va, te = plan.split(subs, k)
    sizes = (len(tr), len(va), len(te))
    kind = cfg.model.kind
    if cfg.model.neural:
        seed = cfg.seeds.init + k
        net = Network(cfg.model.network_config(n_classes), seed=seed)
        tcfg = TrainConfig(lr=cfg.train.lr, batch_size=cfg.train.batch_size,
                           max_epochs=cfg.train.max_epochs, patience=cfg.train.patience,
                           min_delta=cfg.train.min_delta, seed=seed)
        hist = train(net, x[tr], y[tr], tcfg, x[va], y[va])
        pred = net.predict(x[te])
        if checkpoint_dir is not None:
            from .checkpoint import save_network
            save_network(Path(checkpoint_dir) / f"fold{k}.ckpt", net, epoch=hist.best_epoch)
        return _FoldResult(compute_crr(pred, y[te]), sizes, hist.train_loss, hist.val_loss,
                           hist.epoch_time, hist.best_epoch, seconds=time.perf_counter() - t0)
    if kind == "svm-psd":
        model = baselines.fit_svm(x[tr], y[tr], x[va], y[va])
        pred = baselines.predict_svm(model, x[te])
        if checkpoint_dir is not None:
            from .checkpoint import save_svm
            save_svm(Path(checkpoint_dir) / f"fold{k}.ckpt", model)
        return _FoldResult(compute_crr(pred, y[te]), sizes, C=model.C,
                           seconds=time.perf_counter() - t0)
    # Mahalanobis has nothing to tune, so the validation trial is left unused
    model = baselines.fit_mahalanobis(x[tr], y[tr], kind=kind.split("-")[1].upper())
    pred, _ = baselines.classify_mahalanobis(model, x[te])
    if checkpoint_dir is not None:
        from .checkpoint import save_mahalanobis
        save_mahalanobis(Path(checkpoint_dir) / f"fold{k}.ckpt", model)
    return _FoldResult(compute_crr(pred, y[te]), sizes, seconds=time.perf_counter() - t0)


# -- output --------------------------------------------------------------------

SUMMARY_COLUMNS = ("label", "experiment", "state", "band", "electrodes", "model",
                   "conv_filters", "recurrent_units", "n_folds", "mean_crr", "se_crr",
                   "published_crr", "note", "config_hash")


def _summary_row(r: CrrReport) -> dict:
    c = r.config
    m = c["model"]
    neural = m["kind"] in NEURAL_KINDS
    return {
        "label": r.label, "experiment": c["experiment"], "state": c["state"], "band": c["band"],
        "electrodes": c["electrodes"], "model": m["kind"],
        "conv_filters": "-".join(map(str, m["conv_filters"])) if neural else "",
        "recurrent_units": "-".join(map(str, m["recurrent_units"])) if neural else "",
        "n_folds": len(r.fold_crr), "mean_crr": repr(r.mean_crr), "se_crr": repr(r.se_crr),
        "published_crr": "" if r.published_crr is None else r.published_crr,
        "note": r.published_note, "config_hash": r.config_hash,
    }


def report(reports: Sequence[CrrReport], out_dir, formats=("json", "csv")) -> list[Path]:
    """Write ``results.json``, ``summary.csv`` and ``loss_curves.csv`` under ``out_dir``."""
    if not reports:
        raise ArgumentError("nothing to report")
    formats = {formats} if isinstance(formats, str) else set(formats)
    bad = formats - {"json", "csv"}
    if bad:
        raise ArgumentError(f"unknown report formats {sorted(bad)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "json" in formats:
        p = out / "results.json"
        p.write_text(json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True))
        written.append(p)
    if "csv" in formats:
        p = out / "summary.csv"
        with open(p, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
            w.writeheader()
            for r in reports:
                w.writerow(_summary_row(r))
        written.append(p)
        p = out / "loss_curves.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["label", "fold", "epoch", "train_loss", "val_loss", "epoch_seconds"])
            for r in reports:
                for k, curve in enumerate(r.loss_curves):
                    val = r.val_loss_curves[k] if k < len(r.val_loss_curves) else []
                    secs = r.epoch_times[k] if k < len(r.epoch_times) else []
                    for e, loss in enumerate(curve):
                        w.writerow([r.label, k, e, repr(loss),
                                    repr(val[e]) if e < len(val) else "",
                                    repr(secs[e]) if e < len(secs) else ""])
        written.append(p)
    return written


def load_reports(path) -> list[CrrReport]:
    """Reports from a ``results.json`` file or a directory containing one."""
    p = Path(path)
    if p.is_dir():
        p = p / "results.json"
    data = json.loads(p.read_text())
    if isinstance(data, dict):
        data = [data]
    return [CrrReport.from_dict(d) for d in data]
