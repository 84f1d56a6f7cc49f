"""Feed-forward layers with hand-written backward passes.

Every layer keeps what it needs from ``forward`` for the next ``backward``
call, exposes trainable arrays in ``params`` and fills the same keys in
``grads`` on backward. Gradients are overwritten, not accumulated.
"""

from __future__ import annotations

import numpy as np

from ..errors import ArgumentError, ShapeError


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Layer:
    params: dict
    grads: dict

    def __init__(self):
        self.params = {}
        self.grads = {}

    def buffers(self) -> dict:
        return {}

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError


def _colsum(a2):
    """Column sums of a 2-D array as a BLAS matrix-vector product (much faster than ``sum(0)``)."""
    return np.ones(a2.shape[0], a2.dtype) @ a2


def _shifted(dyp, rows, cols):
    """``g[..., a, i, j, :] = dy`` at cell ``q_a - (i - 1, j - 1)`` from the 1-padded ``dyp``."""
    return np.stack([np.stack([dyp[:, rows - i + 2, cols - j + 2, :] for j in range(3)], -2)
                     for i in range(3)], -3)


def conv2d_forward(x, kernels):
    """'Same' 3x3 cross-correlation, stride 1, zero padding.

    x: (N, H, W, Cin), kernels: (3, 3, Cin, Cout) -> (N, H, W, Cout)
    """
    n, h, w, cin = x.shape
    kh, kw, kcin, cout = kernels.shape
    if (kh, kw) != (3, 3) or kcin != cin:
        raise ShapeError(f"kernel {kernels.shape} does not fit input {x.shape}")
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, cout), dtype=np.result_type(x, kernels))
    for i in range(3):
        for j in range(3):
            out += xp[:, i:i + h, j:j + w, :] @ kernels[i, j]
    return out


class Conv2D(Layer):
    """3x3 'same' convolution without bias (a batch norm always follows).

    When most spatial cells of the input are zero across the whole batch
    (sparse electrode meshes), only the occupied cells are multiplied;
    the result is identical to the dense computation.
    """

    sparse_threshold = 0.5

    def __init__(self, cin, cout, rng, dtype=np.float32, input_grad=True, sparse=False, grid=None):
        super().__init__()
        self.cin, self.cout = cin, cout
        self.input_grad = input_grad
        self.sparse = sparse
        # cells known to cover every nonzero input cell (set by the owner)
        self.support = None
        # (H, W) of the grid; needed for compact inputs
        self.grid = grid
        self.params["W"] = glorot_uniform(rng, 9 * cin, 9 * cout, (3, 3, cin, cout), dtype)

    def forward(self, x, train=False):
        """``x`` is ``(N, H, W, Cin)``, or compact ``(N, k, Cin)`` holding only the
        ``support`` cells (all other cells zero)."""
        if x.ndim == 3 and x.shape[-1] == self.cin:
            if self.support is None or self.grid is None or len(self.support) != x.shape[1]:
                raise ShapeError(f"compact input {x.shape} needs matching support cells and a grid")
            self._x, self._compact, self._cells = x, True, self.support
            return self._scatter(x, *self.grid)
        if x.ndim != 4 or x.shape[-1] != self.cin:
            raise ShapeError(f"Conv2D expects (N, H, W, {self.cin}), got {x.shape}")
        self._x, self._compact = x, False
        n, h, w, _ = x.shape
        occupied = None
        if self.sparse:
            occupied = self.support if self.support is not None else np.argwhere(np.any(x, axis=(0, 3)))
        if occupied is None or len(occupied) > self.sparse_threshold * h * w:
            self._cells = None
            return conv2d_forward(x, self.params["W"])
        self._cells = occupied
        return self._scatter(x[:, occupied[:, 0], occupied[:, 1], :], h, w)

    def _scatter(self, xa, h, w):
        """Output of the occupied-cell values ``xa`` (N, k, Cin) on an (h, w) grid."""
        n = xa.shape[0]
        rows, cols = self._cells[:, 0], self._cells[:, 1]
        W = self.params["W"]
        z = xa @ W.transpose(2, 0, 1, 3).reshape(self.cin, 9 * self.cout)
        z = z.reshape(n, len(rows), 3, 3, self.cout)
        out = np.zeros((n, h + 2, w + 2, self.cout), dtype=np.result_type(xa, W))
        for i in range(3):
            for j in range(3):
                # input cell q feeds output cell q - (i - 1, j - 1); +1 for the border
                out[:, rows - i + 2, cols - j + 2, :] += z[:, :, i, j, :]
        return out[:, 1:-1, 1:-1, :]

    def backward(self, dy):
        x, W = self._x, self.params["W"]
        if self._cells is not None:
            return self._sparse_backward(dy)
        n, h, w, cin = x.shape
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        dy2 = dy.reshape(-1, self.cout)
        dW = np.empty_like(W)
        for i in range(3):
            for j in range(3):
                # the input cell under tap (i, j) of every output cell
                dW[i, j] = np.ascontiguousarray(xp[:, i:i + h, j:j + w, :]).reshape(-1, cin).T @ dy2
        self.grads["W"] = dW
        self._x = None
        if not self.input_grad:
            return None
        # transposed convolution = correlation with the flipped, channel-swapped kernel
        return conv2d_forward(dy, W[::-1, ::-1].transpose(0, 1, 3, 2))

    def _sparse_backward(self, dy):
        x, W = self._x, self.params["W"]
        n, h, w, _ = dy.shape
        cin = self.cin
        rows, cols = self._cells[:, 0], self._cells[:, 1]
        xa = (x if self._compact else x[:, rows, cols, :]).reshape(-1, cin)
        dyp = np.pad(dy, ((0, 0), (1, 1), (1, 1), (0, 0)))
        g2 = _shifted(dyp, rows, cols).reshape(n * len(rows), 9 * self.cout)
        self.grads["W"] = (xa.T @ g2).reshape(cin, 3, 3, self.cout).transpose(1, 2, 0, 3)
        self._x = None
        if not self.input_grad:
            return None
        Wt = W.transpose(0, 1, 3, 2).reshape(9 * self.cout, cin)
        if self._compact:
            return (g2 @ Wt).reshape(n, len(rows), cin)
        # zero input cells get gradient too, so use every cell here
        allr, allc = np.divmod(np.arange(h * w), w)
        g2 = _shifted(dyp, allr, allc).reshape(n * h * w, 9 * self.cout)
        return (g2 @ Wt).reshape(n, h, w, cin)


class BatchNorm(Layer):
    """Normalisation over every axis but the last (channels).

    Training uses batch statistics and updates the running averages with
    ``running = momentum * running + (1 - momentum) * batch`` (biased
    batch variance); inference uses the running averages.
    """

    def __init__(self, channels, dtype=np.float32, momentum=0.9, eps=1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.params["gamma"] = np.ones(channels, dtype)
        self.params["beta"] = np.zeros(channels, dtype)
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def forward(self, x, train=False):
        gamma, beta = self.params["gamma"], self.params["beta"]
        if train:
            m = x.size // x.shape[-1]
            if m < 2:
                raise ArgumentError("batch norm in train mode needs at least 2 values per channel")
            mean = _colsum(x.reshape(-1, x.shape[-1])) / x.dtype.type(m)
            xc = x - mean
            flat = xc.reshape(-1, xc.shape[-1])
            var = _colsum(flat * flat) / x.dtype.type(m)
            self.running_mean = (self.momentum * self.running_mean
                                 + (1 - self.momentum) * mean).astype(self.running_mean.dtype)
            self.running_var = (self.momentum * self.running_var
                                + (1 - self.momentum) * var).astype(self.running_var.dtype)
        else:
            mean, var = self.running_mean, self.running_var
            xc = x - mean
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = xc * inv_std
        self._cache = (xhat, inv_std, train)
        return xhat * gamma + beta

    def backward(self, dy):
        xhat, inv_std, train = self._cache
        c = dy.shape[-1]
        gamma = self.params["gamma"]
        dy2 = dy.reshape(-1, c)
        g_gamma = _colsum(dy2 * xhat.reshape(-1, c))
        g_beta = _colsum(dy2)
        self.grads["gamma"], self.grads["beta"] = g_gamma, g_beta
        if not train:
            return dy * (gamma * inv_std)
        m = dy2.shape[0]
        # sum(dxhat) = gamma * g_beta and sum(dxhat * xhat) = gamma * g_gamma
        return (gamma * inv_std / m) * (m * dy - g_beta - xhat * g_gamma)


class ReLU(Layer):
    def forward(self, x, train=False):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dy):
        return dy * self._mask


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by 1 / (1 - rate) in training."""

    def __init__(self, rate, rng):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ArgumentError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate, self.rng = rate, rng

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.rate
        draw = self.rng.random(x.shape, dtype=np.float32)
        self._mask = (draw < keep).astype(x.dtype) / x.dtype.type(keep)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class Dense(Layer):
    """Affine map on the last axis; leading axes are treated as batch/time."""

    def __init__(self, d, n, rng, dtype=np.float32):
        super().__init__()
        self.d, self.n = d, n
        self.params["W"] = glorot_uniform(rng, d, n, (d, n), dtype)
        self.params["b"] = np.zeros(n, dtype)

    def forward(self, x, train=False):
        if x.shape[-1] != self.d:
            raise ShapeError(f"Dense expects last axis {self.d}, got {x.shape}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x = self._x
        x2 = x.reshape(-1, self.d)
        dy2 = dy.reshape(-1, self.n)
        self.grads["W"] = x2.T @ dy2
        self.grads["b"] = _colsum(dy2)
        return dy @ self.params["W"].T


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    The per-example gradient is ``p - onehot``; the batch mean divides it
    by the batch size.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    b = logits.shape[0]
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return float(loss), grad / b
