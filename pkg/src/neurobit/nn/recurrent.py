"""Bias-free GRU and peephole LSTM cells and sequence layers with BPTT.

GRU, per time step::

    z  = sigmoid(W_z x + U_z h_prev)
    r  = sigmoid(W_r x + U_r h_prev)
    hc = tanh(W x + U (r * h_prev))
    h  = (1 - z) * h_prev + z * hc

LSTM, with diagonal peepholes ``V_*``::

    i  = sigmoid(W_i x + U_i h_prev + V_i * c_prev)
    f  = sigmoid(W_f x + U_f h_prev + V_f * c_prev)
    cc = tanh(W_c x + U_c h_prev)
    c  = f * c_prev + i * cc
    o  = sigmoid(W_o x + U_o h_prev + V_o * c)
    h  = o * tanh(c)

Weight matrices are stored as ``(n_units, n_inputs)`` so the step
functions read like the equations above.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ArgumentError, ShapeError
from .layers import Layer, glorot_uniform


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class GruLayerParams:
    W_z: np.ndarray
    W_r: np.ndarray
    W: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U: np.ndarray


@dataclass
class LstmLayerParams:
    W_i: np.ndarray
    W_o: np.ndarray
    W_f: np.ndarray
    W_c: np.ndarray
    U_i: np.ndarray
    U_o: np.ndarray
    U_f: np.ndarray
    U_c: np.ndarray
    V_i: np.ndarray
    V_o: np.ndarray
    V_f: np.ndarray


def _check(x, h, W, U):
    n, d = W.shape
    if x.shape[-1] != d or h.shape[-1] != n or U.shape != (n, n):
        raise ShapeError(f"x {x.shape}, h {h.shape} do not fit W {W.shape}, U {U.shape}")


def gru_step(x_t, h_prev, p: GruLayerParams):
    _check(x_t, h_prev, p.W, p.U)
    z = sigmoid(x_t @ p.W_z.T + h_prev @ p.U_z.T)
    r = sigmoid(x_t @ p.W_r.T + h_prev @ p.U_r.T)
    hc = np.tanh(x_t @ p.W.T + (r * h_prev) @ p.U.T)
    return (1.0 - z) * h_prev + z * hc


def lstm_step(x_t, h_prev, c_prev, p: LstmLayerParams):
    _check(x_t, h_prev, p.W_c, p.U_c)
    i = sigmoid(x_t @ p.W_i.T + h_prev @ p.U_i.T + p.V_i * c_prev)
    f = sigmoid(x_t @ p.W_f.T + h_prev @ p.U_f.T + p.V_f * c_prev)
    cc = np.tanh(x_t @ p.W_c.T + h_prev @ p.U_c.T)
    c = f * c_prev + i * cc
    o = sigmoid(x_t @ p.W_o.T + h_prev @ p.U_o.T + p.V_o * c)
    return o * np.tanh(c), c


class _Recurrent(Layer):
    """Shared plumbing: (B, T, d) in, (B, T, n) out, zero initial state.

    ``recurrent_dropout`` draws one mask per sequence and applies it to
    ``h_prev`` wherever it enters a ``U`` product; the carried state is
    left unmasked.
    """

    gates: tuple = ()

    def __init__(self, d, n, rng, dtype=np.float32, recurrent_dropout=0.0, mask_rng=None):
        super().__init__()
        if not 0.0 <= recurrent_dropout < 1.0:
            raise ArgumentError(f"recurrent dropout must be in [0, 1), got {recurrent_dropout}")
        self.d, self.n = d, n
        self.rng = rng if mask_rng is None else mask_rng
        self.recurrent_dropout = recurrent_dropout
        for g in self.gates:
            self.params["W" + g] = glorot_uniform(rng, d, n, (n, d), dtype)
        for g in self.gates:
            self.params["U" + g] = glorot_uniform(rng, n, n, (n, n), dtype)

    def _mask(self, b, dtype, train):
        if not train or self.recurrent_dropout == 0.0:
            return None
        keep = 1.0 - self.recurrent_dropout
        return (self.rng.random((b, self.n)) < keep).astype(dtype) / dtype.type(keep)

    def _input_projection(self, x):
        if x.ndim != 3 or x.shape[-1] != self.d:
            raise ShapeError(f"{type(self).__name__} expects (B, T, {self.d}), got {x.shape}")
        Wcat = np.concatenate([self.params["W" + g] for g in self.gates], axis=0)
        return (x @ Wcat.T).reshape(x.shape[0], x.shape[1], len(self.gates), self.n)

    def _input_backward(self, x, dpre):
        # dpre: (B, T, n_gates, n) gradients of the gate pre-activations
        b, t, _ = x.shape
        dflat = dpre.reshape(b * t, -1)
        x2 = x.reshape(b * t, self.d)
        dWcat = dflat.T @ x2
        for k, g in enumerate(self.gates):
            self.grads["W" + g] = dWcat[k * self.n:(k + 1) * self.n]
        Wcat = np.concatenate([self.params["W" + g] for g in self.gates], axis=0)
        return (dflat @ Wcat).reshape(b, t, self.d)


class GRULayer(_Recurrent):
    gates = ("_z", "_r", "")

    def cell_params(self) -> GruLayerParams:
        p = self.params
        return GruLayerParams(p["W_z"], p["W_r"], p["W"], p["U_z"], p["U_r"], p["U"])

    def forward(self, x, train=False):
        b, t, _ = x.shape if x.ndim == 3 else (None, None, None)
        xp = self._input_projection(x)
        Uz, Ur, U = self.params["U_z"], self.params["U_r"], self.params["U"]
        m = self._mask(b, x.dtype, train)
        h = np.zeros((b, self.n), x.dtype)
        hs = np.empty((b, t, self.n), x.dtype)
        cache = []
        for s in range(t):
            hm = h if m is None else h * m
            z = sigmoid(xp[:, s, 0] + hm @ Uz.T)
            r = sigmoid(xp[:, s, 1] + hm @ Ur.T)
            rh = r * hm
            hc = np.tanh(xp[:, s, 2] + rh @ U.T)
            cache.append((h, hm, z, r, rh, hc))
            h = (1.0 - z) * h + z * hc
            hs[:, s] = h
        self._cache = (x, m, cache)
        return hs

    def backward(self, dhs):
        x, m, cache = self._cache
        Uz, Ur, U = self.params["U_z"], self.params["U_r"], self.params["U"]
        b, t, _ = dhs.shape
        dpre = np.empty((b, t, 3, self.n), dhs.dtype)
        dUz, dUr, dU = np.zeros_like(Uz), np.zeros_like(Ur), np.zeros_like(U)
        dh_next = np.zeros((b, self.n), dhs.dtype)
        for s in reversed(range(t)):
            h_prev, hm, z, r, rh, hc = cache[s]
            dh = dhs[:, s] + dh_next
            dz = dh * (hc - h_prev)
            dah = dh * z * (1.0 - hc * hc)
            drh = dah @ U
            dar = drh * hm * r * (1.0 - r)
            daz = dz * z * (1.0 - z)
            dU += dah.T @ rh
            dUz += daz.T @ hm
            dUr += dar.T @ hm
            dhm = drh * r + daz @ Uz + dar @ Ur
            dh_next = dh * (1.0 - z) + (dhm if m is None else dhm * m)
            dpre[:, s, 0], dpre[:, s, 1], dpre[:, s, 2] = daz, dar, dah
        self.grads.update(U_z=dUz, U_r=dUr, U=dU)
        dx = self._input_backward(x, dpre)
        self._cache = None
        return dx


class LSTMLayer(_Recurrent):
    gates = ("_i", "_o", "_f", "_c")

    def __init__(self, d, n, rng, dtype=np.float32, recurrent_dropout=0.0, mask_rng=None):
        super().__init__(d, n, rng, dtype, recurrent_dropout, mask_rng)
        for g in ("_i", "_o", "_f"):
            self.params["V" + g] = np.zeros(n, dtype)

    def cell_params(self) -> LstmLayerParams:
        return LstmLayerParams(**self.params)

    def forward(self, x, train=False):
        b, t, _ = x.shape if x.ndim == 3 else (None, None, None)
        xp = self._input_projection(x)
        p = self.params
        Ui, Uo, Uf, Uc = p["U_i"], p["U_o"], p["U_f"], p["U_c"]
        Vi, Vo, Vf = p["V_i"], p["V_o"], p["V_f"]
        m = self._mask(b, x.dtype, train)
        h = np.zeros((b, self.n), x.dtype)
        c = np.zeros((b, self.n), x.dtype)
        hs = np.empty((b, t, self.n), x.dtype)
        cache = []
        for s in range(t):
            hm = h if m is None else h * m
            i = sigmoid(xp[:, s, 0] + hm @ Ui.T + Vi * c)
            f = sigmoid(xp[:, s, 2] + hm @ Uf.T + Vf * c)
            cc = np.tanh(xp[:, s, 3] + hm @ Uc.T)
            c_new = f * c + i * cc
            o = sigmoid(xp[:, s, 1] + hm @ Uo.T + Vo * c_new)
            tc = np.tanh(c_new)
            cache.append((hm, c, i, f, cc, c_new, o, tc))
            h, c = o * tc, c_new
            hs[:, s] = h
        self._cache = (x, m, cache)
        return hs

    def backward(self, dhs):
        x, m, cache = self._cache
        p = self.params
        Ui, Uo, Uf, Uc = p["U_i"], p["U_o"], p["U_f"], p["U_c"]
        Vi, Vo, Vf = p["V_i"], p["V_o"], p["V_f"]
        b, t, _ = dhs.shape
        g = {k: np.zeros_like(p[k]) for k in ("U_i", "U_o", "U_f", "U_c", "V_i", "V_o", "V_f")}
        dpre = np.empty((b, t, 4, self.n), dhs.dtype)
        dh_next = np.zeros((b, self.n), dhs.dtype)
        dc_next = np.zeros((b, self.n), dhs.dtype)
        for s in reversed(range(t)):
            hm, c_prev, i, f, cc, c, o, tc = cache[s]
            dh = dhs[:, s] + dh_next
            dao = dh * tc * o * (1.0 - o)
            dc = dc_next + dh * o * (1.0 - tc * tc) + dao * Vo
            dai = dc * cc * i * (1.0 - i)
            daf = dc * c_prev * f * (1.0 - f)
            dac = dc * i * (1.0 - cc * cc)
            g["V_o"] += (dao * c).sum(axis=0)
            g["V_i"] += (dai * c_prev).sum(axis=0)
            g["V_f"] += (daf * c_prev).sum(axis=0)
            g["U_i"] += dai.T @ hm
            g["U_o"] += dao.T @ hm
            g["U_f"] += daf.T @ hm
            g["U_c"] += dac.T @ hm
            dhm = dai @ Ui + dao @ Uo + daf @ Uf + dac @ Uc
            dh_next = dhm if m is None else dhm * m
            dc_next = dc * f + dai * Vi + daf * Vf
            dpre[:, s, 0], dpre[:, s, 1], dpre[:, s, 2], dpre[:, s, 3] = dai, dao, daf, dac
        self.grads.update(g)
        dx = self._input_backward(x, dpre)
        self._cache = None
        return dx
