"""Central finite-difference gradient checks for the hand-written layers."""

from __future__ import annotations

import numpy as np

from .layers import BatchNorm, Conv2D, Dense, softmax_cross_entropy
from .recurrent import GRULayer, LSTMLayer


def numerical_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def check_layer(layer, x: np.ndarray, rng: np.random.Generator, *, train=True,
                input_grad=True, reseed=None, h=1e-5) -> dict:
    """Max relative error per parameter (and ``"x"``) for ``sum(R * layer(x))``.

    ``reseed`` is called before every forward so stochastic layers draw
    the same masks on each evaluation.
    """
    def run():
        if reseed is not None:
            reseed()
        return layer.forward(x, train)

    out = run()
    weights = rng.standard_normal(out.shape)

    def loss():
        return float(np.sum(weights * run()))

    run()
    dx = layer.backward(weights)
    analytic = {k: v.copy() for k, v in layer.grads.items()}
    errors = {}
    for key, p in layer.params.items():
        errors[key] = relative_error(analytic[key], numerical_gradient(loss, p, h))
    if input_grad:
        errors["x"] = relative_error(dx, numerical_gradient(loss, x, h))
    return errors


def random_case(kind: str, seed: int) -> dict:
    """Max relative gradient error for one randomised layer of ``kind`` (float64).

    Shapes stay within 9x9x4 spatial inputs and 8 units.
    """
    rng = np.random.default_rng(seed)
    dt = np.float64
    if kind == "conv2d":
        hh, ww = rng.integers(3, 10, size=2)
        cin, cout = rng.integers(1, 5), rng.integers(1, 9)
        n = rng.integers(1, 3)
        layer = Conv2D(cin, cout, rng, dt)
        x = rng.standard_normal((n, hh, ww, cin))
        return check_layer(layer, x, rng)
    if kind == "batchnorm":
        c = rng.integers(1, 5)
        layer = BatchNorm(c, dt)
        layer.params["gamma"][:] = rng.uniform(0.5, 2.0, c)
        layer.params["beta"][:] = rng.standard_normal(c)
        x = rng.standard_normal((rng.integers(2, 4), rng.integers(2, 10), rng.integers(2, 10), c))
        return check_layer(layer, x, rng, train=bool(seed % 4))
    if kind == "dense":
        d, n = rng.integers(1, 9, size=2)
        layer = Dense(d, n, rng, dt)
        layer.params["b"][:] = rng.standard_normal(n)
        x = rng.standard_normal((rng.integers(1, 4), rng.integers(1, 4), d))
        return check_layer(layer, x, rng)
    if kind in ("gru", "lstm"):
        d, n = rng.integers(1, 9, size=2)
        b, t = rng.integers(1, 4), rng.integers(1, 5)
        rdrop = 0.3 if seed % 2 else 0.0
        cls = GRULayer if kind == "gru" else LSTMLayer
        layer = cls(d, n, rng, dt, recurrent_dropout=rdrop)
        for key in layer.params:
            if key.startswith("V"):
                layer.params[key][:] = rng.uniform(-0.5, 0.5, n)
        x = rng.standard_normal((b, t, d))

        def reseed():
            layer.rng = np.random.default_rng(seed + 1000)

        return check_layer(layer, x, rng, train=True, reseed=reseed)
    if kind == "softmax_ce":
        b, k = rng.integers(1, 5), rng.integers(2, 9)
        logits = rng.standard_normal((b, k)) * 2
        labels = rng.integers(0, k, size=b)
        _, grad = softmax_cross_entropy(logits, labels)
        num = numerical_gradient(lambda: softmax_cross_entropy(logits, labels)[0], logits)
        return {"logits": relative_error(grad, num)}
    raise ValueError(f"unknown layer kind {kind!r}")


LAYER_KINDS = ("conv2d", "batchnorm", "dense", "gru", "lstm", "softmax_ce")
