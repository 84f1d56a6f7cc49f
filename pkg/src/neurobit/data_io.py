"""Loading, synthesis, affective labelling and subsampling of DEAP-style EEG.

A recording holds one subject's trials as ``(n_trials, 32, 8064)`` float32
microvolts at 128 Hz: 3 s of pre-trial baseline followed by a 60 s trial.
"""

from __future__ import annotations

import enum
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import ArgumentError, EmptyDatasetError, LoadError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 128
N_CHANNELS = 32
N_SAMPLES = 8064
N_DEAP_TRIALS = 40
PRETRIAL_SAMPLES = 3 * SAMPLE_RATE
TRIAL_SAMPLES = 60 * SAMPLE_RATE
SUBSAMPLE_LEN = 10 * SAMPLE_RATE
SUBSAMPLES_PER_TRIAL = TRIAL_SAMPLES // SUBSAMPLE_LEN
RATING_THRESHOLD = 5.0

MAGIC = b"NEUROBIT-EEG\x00\x00\x00\x00"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<16s4I")

# Storage order of the DEAP preprocessed export.
DEAP_CHANNELS = (
    "Fp1", "AF3", "F3", "F7", "FC5", "FC1", "C3", "T7",
    "CP5", "CP1", "P3", "P7", "PO3", "O1", "Oz", "Pz",
    "Fp2", "AF4", "Fz", "F4", "F8", "FC6", "FC2", "Cz",
    "C4", "T8", "CP6", "CP2", "P4", "P8", "PO4", "O2",
)

# Ten-twenty labels accepted in a manifest (the DEAP montage plus the
# remaining common 10-20 / 10-10 sites).
TEN_TWENTY = frozenset(DEAP_CHANNELS) | frozenset({
    "Fpz", "AFz", "F1", "F2", "F5", "F6", "FCz", "FC3", "FC4", "FT7", "FT8",
    "C1", "C2", "C5", "C6", "CPz", "CP3", "CP4", "TP7", "TP8", "P1", "P2",
    "P5", "P6", "POz", "PO7", "PO8", "T3", "T4", "T5", "T6", "A1", "A2",
})


class AffectiveState(str, enum.Enum):
    LL = "LL"
    LH = "LH"
    HL = "HL"
    HH = "HH"


ALL = "ALL"
STATES = (AffectiveState.LL, AffectiveState.LH, AffectiveState.HL, AffectiveState.HH)


@dataclass(frozen=True)
class RawRecording:
    subject_id: int
    trials: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        validate_recording(self)

    @property
    def n_trials(self) -> int:
        return self.trials.shape[0]

    def states(self) -> list[AffectiveState]:
        return [label_affective_state(v, a) for v, a in self.ratings]


@dataclass(frozen=True)
class Subsample:
    subject_id: int
    trial_id: int
    subsample_index: int
    state: AffectiveState
    data: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class DatasetManifest:
    subjects: list[int]
    channel_names: list[str]
    sample_rate: int = SAMPLE_RATE
    provenance: str = "synthetic"

    def __post_init__(self):
        names = self.channel_names
        if len(names) != N_CHANNELS:
            raise LoadError(f"manifest lists {len(names)} channels, expected {N_CHANNELS}",
                            field="channel_names")
        if len(set(names)) != len(names):
            raise LoadError("manifest channel names are not unique", field="channel_names")
        unknown = [n for n in names if n not in TEN_TWENTY]
        if unknown:
            raise LoadError(f"unknown ten-twenty labels: {unknown}", field="channel_names")
        if self.sample_rate != SAMPLE_RATE:
            raise LoadError(f"sample_rate must be {SAMPLE_RATE}", field="sample_rate")
        if self.provenance not in ("deap-export", "synthetic"):
            raise LoadError(f"unknown provenance {self.provenance!r}", field="provenance")

    def to_json(self, files: Sequence[str]) -> dict:
        return {
            "format": "neurobit-eeg",
            "version": FORMAT_VERSION,
            "sample_rate": self.sample_rate,
            "provenance": self.provenance,
            "channel_names": list(self.channel_names),
            "subjects": [{"subject_id": s, "file": f} for s, f in zip(self.subjects, files)],
        }


def validate_recording(rec: RawRecording) -> None:
    trials, ratings = rec.trials, rec.ratings
    if rec.subject_id < 1:
        raise ArgumentError(f"subject_id must be >= 1, got {rec.subject_id}")
    if trials.ndim != 3 or trials.shape[1:] != (N_CHANNELS, N_SAMPLES) or trials.shape[0] < 1:
        raise LoadError(f"trials shape {trials.shape} is not (n, {N_CHANNELS}, {N_SAMPLES})",
                        field="trials")
    if ratings.shape != (trials.shape[0], 2):
        raise LoadError(f"ratings shape {ratings.shape} does not match {trials.shape[0]} trials",
                        field="ratings")
    if not np.all((ratings >= 1.0) & (ratings <= 9.0)):
        raise LoadError("rating outside [1, 9]", field="ratings")


def label_affective_state(valence: float, arousal: float) -> AffectiveState:
    """Valence/arousal pair to LL/LH/HL/HH; a score of 5 or more counts as high."""
    for name, v in (("valence", valence), ("arousal", arousal)):
        if not 1.0 <= v <= 9.0:
            raise ArgumentError(f"{name} {v} outside [1, 9]")
    key = ("H" if valence >= RATING_THRESHOLD else "L") + ("H" if arousal >= RATING_THRESHOLD else "L")
    return AffectiveState(key)


# -- binary export ---------------------------------------------------------

def write_subject_file(path, rec: RawRecording) -> None:
    n = rec.n_trials
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, n, N_CHANNELS, N_SAMPLES))
        fh.write(np.ascontiguousarray(rec.trials, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(rec.ratings, dtype="<f4").tobytes())


def read_subject_file(path, subject_id: int, *, require_deap_trials: bool = False) -> RawRecording:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise LoadError(f"{path}: file shorter than header", field="header")
    magic, version, n_trials, n_channels, n_samples = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic {magic!r}", field="magic")
    if version != FORMAT_VERSION:
        raise LoadError(f"{path}: unsupported version {version}", field="version")
    if n_channels != N_CHANNELS:
        raise LoadError(f"{path}: header claims {n_channels} channels, expected {N_CHANNELS}",
                        field="n_channels")
    if n_samples != N_SAMPLES:
        raise LoadError(f"{path}: header claims {n_samples} samples, expected {N_SAMPLES}",
                        field="n_samples")
    if n_trials < 1 or n_trials > N_DEAP_TRIALS:
        raise LoadError(f"{path}: header claims {n_trials} trials", field="n_trials")
    if require_deap_trials and n_trials != N_DEAP_TRIALS:
        raise LoadError(f"{path}: DEAP export must hold {N_DEAP_TRIALS} trials, got {n_trials}",
                        field="n_trials")
    n_data = n_trials * n_channels * n_samples
    expected = _HEADER.size + 4 * (n_data + 2 * n_trials)
    if len(raw) != expected:
        raise LoadError(f"{path}: size {len(raw)} bytes, expected {expected}", field="payload")
    body = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    trials = body[:n_data].reshape(n_trials, n_channels, n_samples).astype(np.float32)
    ratings = body[n_data:].reshape(n_trials, 2).astype(np.float64)
    if not np.all(np.isfinite(trials)):
        raise LoadError(f"{path}: non-finite samples", field="trials")
    return RawRecording(subject_id, trials, ratings)


def write_export(recordings: Sequence[RawRecording], directory, *,
                 channel_names: Sequence[str] = DEAP_CHANNELS,
                 provenance: str = "synthetic") -> Path:
    """Write one binary file per subject plus ``manifest.json``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest([r.subject_id for r in recordings], list(channel_names),
                               provenance=provenance)
    files = []
    for rec in recordings:
        name = f"s{rec.subject_id:02d}.bin"
        write_subject_file(directory / name, rec)
        files.append(name)
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest.to_json(files), indent=2))
    return path


def read_manifest(path) -> tuple[DatasetManifest, list[tuple[int, Path]]]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise LoadError(f"{path}: manifest not found", field="manifest")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise LoadError(f"{path}: invalid JSON ({exc})", field="manifest") from None
    for key in ("channel_names", "subjects"):
        if key not in doc:
            raise LoadError(f"{path}: missing key {key!r}", field=key)
    entries = [(int(s["subject_id"]), path.parent / s["file"]) for s in doc["subjects"]]
    if not 1 <= len(entries) <= 32:
        raise LoadError(f"{path}: {len(entries)} subjects, expected 1-32", field="subjects")
    manifest = DatasetManifest(
        subjects=[sid for sid, _ in entries],
        channel_names=list(doc["channel_names"]),
        sample_rate=int(doc.get("sample_rate", SAMPLE_RATE)),
        provenance=doc.get("provenance", "deap-export"),
    )
    return manifest, entries


def load_deap_export(path) -> list[RawRecording]:
    """Load every subject listed in an export manifest (file or its directory)."""
    recordings, _ = load_export(path)
    return recordings


def load_export(path) -> tuple[list[RawRecording], DatasetManifest]:
    manifest, entries = read_manifest(path)
    strict = manifest.provenance == "deap-export"
    recordings = [read_subject_file(f, sid, require_deap_trials=strict) for sid, f in entries]
    logger.info("loaded %d recordings from %s", len(recordings), path)
    return recordings, manifest


# -- synthetic data --------------------------------------------------------

def _state_ratings(state: AffectiveState, n: int, rng: np.random.Generator) -> np.ndarray:
    def draw(high):
        return rng.uniform(5.0, 9.0, n) if high else rng.uniform(1.0, 4.99, n)
    return np.column_stack([draw(state.value[0] == "H"), draw(state.value[1] == "H")])


def generate_synthetic_dataset(n_subjects: int, n_trials_per_state: int, seed: int,
                               *, n_components: int = 3, noise_scale: float = 0.5,
                               ar_coef: float = 0.9) -> list[RawRecording]:
    """Desk-scale DEAP stand-in with 4 * ``n_trials_per_state`` trials per subject.

    Every subject owns a set of ``n_components`` frequencies in 5-38 Hz
    (distinct dominant frequency across subjects) mixed into each channel
    with channel-specific gains and small per-channel detuning, on top of
    AR(1) noise. Phases are redrawn per trial.
    """
    if n_subjects < 2:
        raise ArgumentError(f"need at least 2 subjects, got {n_subjects}")
    if n_trials_per_state < 1 or 4 * n_trials_per_state > N_DEAP_TRIALS:
        raise ArgumentError(f"n_trials_per_state must be in [1, 10], got {n_trials_per_state}")
    rng = np.random.default_rng(seed)
    grid = np.arange(5.0, 39.0)
    t = np.arange(N_SAMPLES) / SAMPLE_RATE
    taken: set[float] = set()
    recordings = []
    for sid in range(1, n_subjects + 1):
        while True:
            freqs = rng.choice(grid, size=n_components, replace=False)
            if freqs[0] not in taken or len(taken) >= len(grid):
                break
        taken.add(freqs[0])
        gains = rng.uniform(0.5, 1.5, (N_CHANNELS, n_components))
        gains[:, 0] *= 2.0
        detune = rng.uniform(-0.5, 0.5, (N_CHANNELS, n_components))
        chan_freqs = freqs[None, :] + detune
        n_trials = 4 * n_trials_per_state
        trials = np.empty((n_trials, N_CHANNELS, N_SAMPLES), np.float32)
        ratings = np.concatenate([_state_ratings(s, n_trials_per_state, rng) for s in STATES])
        for k in range(n_trials):
            phase = rng.uniform(0, 2 * np.pi, (N_CHANNELS, n_components, 1))
            sig = (gains[..., None] * np.sin(2 * np.pi * chan_freqs[..., None] * t + phase)).sum(1)
            noise = lfilter([1.0], [1.0, -ar_coef], rng.standard_normal((N_CHANNELS, N_SAMPLES)), axis=1)
            noise *= noise_scale * np.sqrt(1 - ar_coef ** 2)
            trials[k] = 10.0 * (sig + noise)
        order = rng.permutation(n_trials)
        recordings.append(RawRecording(sid, trials[order], ratings[order]))
    return recordings


def generate_deap_shaped_ratings(n_subjects: int, seed: int) -> list[np.ndarray]:
    """Random 40x2 rating tables for DEAP-shaped fold-plan checks (no signal payload)."""
    rng = np.random.default_rng(seed)
    return [rng.uniform(1.0, 9.0, (N_DEAP_TRIALS, 2)) for _ in range(n_subjects)]


# -- trial selection and subsampling ---------------------------------------

def trial_signal(rec: RawRecording, trial_id: int) -> np.ndarray:
    """The 60 s stimulus part of a trial, ``(32, 7680)``; the 3 s baseline is dropped."""
    return rec.trials[trial_id, :, PRETRIAL_SAMPLES:PRETRIAL_SAMPLES + TRIAL_SAMPLES]


def cut_subsamples(x: np.ndarray) -> list[np.ndarray]:
    if x.shape[-1] < SUBSAMPLES_PER_TRIAL * SUBSAMPLE_LEN:
        raise ArgumentError(f"trial too short to cut: {x.shape[-1]} samples")
    return [x[..., i * SUBSAMPLE_LEN:(i + 1) * SUBSAMPLE_LEN] for i in range(SUBSAMPLES_PER_TRIAL)]


def select_trials(ratings_by_subject: dict[int, np.ndarray], state, trials_per_state: int,
                  seed: int) -> dict[tuple[int, AffectiveState], list[int]]:
    """Seeded draw of ``trials_per_state`` trial ids per (subject, state).

    Subjects with too few qualifying trials for a state are left out of
    that state. ``state=ALL`` draws every state and keeps the union.
    """
    states = STATES if state in (ALL, None) else (AffectiveState(state),)
    rng = np.random.default_rng(seed)
    chosen = {}
    for st in states:
        for sid in sorted(ratings_by_subject):
            labels = [label_affective_state(v, a) for v, a in ratings_by_subject[sid]]
            pool = np.array([i for i, s in enumerate(labels) if s == st])
            if len(pool) < trials_per_state:
                continue
            pick = rng.choice(pool, size=trials_per_state, replace=False)
            chosen[(sid, st)] = sorted(int(i) for i in pick)
    if not chosen:
        raise EmptyDatasetError(f"no subject has {trials_per_state} trials in state {state}")
    return chosen


def select_trials_and_subsample(recordings: Iterable[RawRecording], state=ALL,
                                trials_per_state: int = 5, seed: int = 0,
                                preprocess: Callable[[np.ndarray], np.ndarray] | None = None,
                                ) -> list[Subsample]:
    """Select trials per state and cut each into six contiguous 10 s subsamples.

    ``preprocess`` (band filter, re-referencing) is applied to the whole
    60 s trial before cutting so filter transients stay out of the cuts.
    """
    by_id = {r.subject_id: r for r in recordings}
    chosen = select_trials({sid: r.ratings for sid, r in by_id.items()}, state,
                           trials_per_state, seed)
    out = []
    for (sid, st), trial_ids in sorted(chosen.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        rec = by_id[sid]
        for tid in trial_ids:
            x = trial_signal(rec, tid)
            x = preprocess(x) if preprocess is not None else np.asarray(x, dtype=np.float64)
            for k, piece in enumerate(cut_subsamples(x)):
                out.append(Subsample(sid, tid, k, st, piece))
    return out


def participants_per_state(ratings_by_subject: dict[int, np.ndarray],
                           trials_per_state: int = 5) -> dict[str, int]:
    counts = {}
    for st in STATES:
        counts[st.value] = sum(
            1 for r in ratings_by_subject.values()
            if sum(label_affective_state(v, a) == st for v, a in r) >= trials_per_state)
    counts[ALL] = sum(
        1 for r in ratings_by_subject.values()
        if any(sum(label_affective_state(v, a) == st for v, a in r) >= trials_per_state
               for st in STATES))
    return counts
