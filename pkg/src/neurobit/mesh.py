"""Scalp-topology mesh encoding: (channels, time) -> (windows, 9, 9, window_len)."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .data_io import DEAP_CHANNELS, SAMPLE_RATE, Subsample
from .errors import ArgumentError, FitError, ShapeError

GRID = 9
WINDOW = SAMPLE_RATE

ELECTRODE_SETS = {
    "F": ("F3", "F4", "Fz", "F7", "F8"),
    "CP": ("C3", "Cz", "C4", "CP1", "CP2"),
    "T": ("T7", "T8", "CP5", "CP6", "FC5"),
    "OP": ("O1", "Oz", "O2", "PO3", "PO4"),
    "FP": ("Fz", "F3", "F4", "Pz", "P3"),
    "ALL": DEAP_CHANNELS,
}


@dataclass(frozen=True)
class MeshLayout:
    positions: dict
    version: str = "v1"
    digest: str = ""

    def __post_init__(self):
        seen = {}
        for name, (r, c) in self.positions.items():
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise ArgumentError(f"{name} at ({r}, {c}) outside the {GRID}x{GRID} grid")
            if (r, c) in seen:
                raise ArgumentError(f"{name} and {seen[(r, c)]} share cell ({r}, {c})")
            seen[(r, c)] = name

    def cell(self, name: str) -> tuple[int, int]:
        try:
            return self.positions[name]
        except KeyError:
            raise ArgumentError(f"channel {name!r} is not in the mesh layout") from None

    def occupancy(self) -> np.ndarray:
        grid = np.zeros((GRID, GRID), dtype=bool)
        for r, c in self.positions.values():
            grid[r, c] = True
        return grid


@dataclass(frozen=True)
class ElectrodeSet:
    name: str
    channels: tuple


@dataclass(frozen=True)
class MeshSequence:
    tensor: np.ndarray
    subject_id: int

    @property
    def shape(self):
        return self.tensor.shape


def parse_layout_table(text: str, version: str = "v1") -> MeshLayout:
    positions = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 3:
            raise ArgumentError(f"layout line {lineno}: expected 'NAME row col', got {line!r}")
        name, r, c = parts[0], int(parts[1]), int(parts[2])
        if name in positions:
            raise ArgumentError(f"layout line {lineno}: duplicate channel {name}")
        positions[name] = (r, c)
    digest = hashlib.sha256(text.encode()).hexdigest()
    return MeshLayout(positions, version, digest)


def standard_layout_text() -> str:
    return resources.files("neurobit.data").joinpath("layout_v1.txt").read_text()


def build_standard_layout(channel_names: Sequence[str] = DEAP_CHANNELS) -> MeshLayout:
    """Layout restricted to ``channel_names`` from the shipped v1 table."""
    table = parse_layout_table(standard_layout_text())
    missing = [n for n in channel_names if n not in table.positions]
    if missing:
        raise ArgumentError(f"no mesh cell for channels {missing}")
    return MeshLayout({n: table.positions[n] for n in channel_names}, table.version, table.digest)


def electrode_set(name: str) -> ElectrodeSet:
    key = str(name).upper()
    if key not in ELECTRODE_SETS:
        raise ArgumentError(f"unknown electrode set {name!r}; expected one of {sorted(ELECTRODE_SETS)}")
    return ElectrodeSet(key, tuple(ELECTRODE_SETS[key]))


def _placement(layout: MeshLayout, active: ElectrodeSet, channel_names: Sequence[str]):
    index = {n: i for i, n in enumerate(channel_names)}
    rows, cols, chans = [], [], []
    for name in active.channels:
        if name not in index:
            raise ArgumentError(f"active channel {name!r} missing from the recording")
        r, c = layout.cell(name)
        rows.append(r)
        cols.append(c)
        chans.append(index[name])
    return np.array(rows), np.array(cols), np.array(chans)


def encode_array(x, layout: MeshLayout, active: ElectrodeSet,
                 channel_names: Sequence[str] = DEAP_CHANNELS, window: int = WINDOW,
                 dtype=np.float32) -> np.ndarray:
    """Encode ``(C, T)`` or a batch ``(N, C, T)`` into ``(..., T // window, 9, 9, window)``.

    Each active channel is z-scored over its full length; unmapped and
    inactive cells stay zero.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[1] != len(channel_names):
        raise ShapeError(f"expected (N, {len(channel_names)}, T), got {x.shape}")
    n, _, t = x.shape
    if t % window:
        raise ShapeError(f"length {t} is not a multiple of the {window}-sample window")
    rows, cols, chans = _placement(layout, active, channel_names)
    sel = x[:, chans, :]
    mu = sel.mean(axis=-1, keepdims=True)
    sd = sel.std(axis=-1, keepdims=True)
    if np.any(sd == 0):
        bad = np.argwhere(sd[..., 0] == 0)[0]
        raise FitError(f"channel {active.channels[bad[1]]} is constant; cannot normalise")
    sel = (sel - mu) / sd
    out = np.zeros((n, t // window, GRID, GRID, window), dtype=dtype)
    # (N, A, S, W) -> (N, S, A, W), scattered to the active cells
    out[:, :, rows, cols, :] = sel.reshape(n, len(chans), t // window, window).transpose(0, 2, 1, 3)
    return out[0] if single else out


def encode_subsample(sub: Subsample, layout: MeshLayout, active: ElectrodeSet,
                     channel_names: Sequence[str] = DEAP_CHANNELS) -> MeshSequence:
    return MeshSequence(encode_array(sub.data, layout, active, channel_names, dtype=np.float64),
                        sub.subject_id)


def decode_mesh(mesh, layout: MeshLayout, active: ElectrodeSet) -> np.ndarray:
    """Inverse placement: active channels' series ``(A, S * window)`` in ``active`` order."""
    tensor = mesh.tensor if isinstance(mesh, MeshSequence) else np.asarray(mesh)
    s, _, _, w = tensor.shape
    out = np.empty((len(active.channels), s * w), dtype=tensor.dtype)
    for i, name in enumerate(active.channels):
        r, c = layout.cell(name)
        out[i] = tensor[:, r, c, :].reshape(-1)
    return out
