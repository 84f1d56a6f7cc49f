"""Time-distributed CNN -> dense -> GRU/LSTM stack -> softmax classifier."""

from __future__ import annotations

import contextlib
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ArgumentError, ShapeError, TrainingError
from .layers import BatchNorm, Conv2D, Dense, Dropout, ReLU, softmax, softmax_cross_entropy
from .optim import RMSprop
from .recurrent import GRULayer, LSTMLayer

logger = logging.getLogger(__name__)


@dataclass
class NetworkConfig:
    conv_filters: list = field(default_factory=lambda: [128, 64, 32])
    recurrent_units: list = field(default_factory=lambda: [32, 16])
    recurrent_kind: str = "GRU"
    td_dense_units: int = 128
    dropout: float = 0.3
    n_classes: int = 32
    kernel: int = 3
    input_shape: tuple = (10, 9, 9, 128)

    def __post_init__(self):
        self.recurrent_kind = self.recurrent_kind.upper()
        self.conv_filters = [int(c) for c in self.conv_filters]
        self.recurrent_units = [int(u) for u in self.recurrent_units]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        if not self.conv_filters or not self.recurrent_units:
            raise ArgumentError("need at least one conv layer and one recurrent layer")
        if self.recurrent_kind not in ("GRU", "LSTM"):
            raise ArgumentError(f"recurrent_kind must be GRU or LSTM, got {self.recurrent_kind}")
        if not 0.0 <= self.dropout < 1.0:
            raise ArgumentError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.kernel != 3:
            raise ArgumentError("only 3x3 kernels are supported")
        if self.n_classes < 2:
            raise ArgumentError("need at least 2 classes")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d


@dataclass
class TrainConfig:
    lr: float = 0.003
    rho: float = 0.9
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    # a validation loss must beat the best so far by more than this to count
    min_delta: float = 0.0

    def __post_init__(self):
        if self.min_delta < 0:
            raise ArgumentError(f"min_delta must be >= 0, got {self.min_delta}")
        if self.lr <= 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")


def param_count(cfg: NetworkConfig) -> int:
    """Closed-form trainable parameter count.

    conv ``9 Cin Cout + 2 Cout`` (no bias, batch-norm gamma/beta);
    dense ``d n + n``; GRU ``3 (d n + n^2)``; LSTM ``4 (d n + n^2) + 3 n``.
    """
    _, h, w, cin = cfg.input_shape
    total = 0
    for cout in cfg.conv_filters:
        total += 9 * cin * cout + 2 * cout
        cin = cout
    d = h * w * cin
    total += d * cfg.td_dense_units + cfg.td_dense_units
    d = cfg.td_dense_units
    for n in cfg.recurrent_units:
        total += recurrent_param_count(cfg.recurrent_kind, d, n)
        d = n
    return total + d * cfg.n_classes + cfg.n_classes


def recurrent_param_count(kind: str, d: int, n: int) -> int:
    if kind.upper() == "GRU":
        return 3 * (d * n + n * n)
    return 4 * (d * n + n * n) + 3 * n


class Network:
    def __init__(self, cfg: NetworkConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.seed = seed
        self.dtype = np.dtype(dtype)
        init = np.random.default_rng(seed)
        self.drop_rng = np.random.default_rng([seed, 1])
        s, h, w, cin = cfg.input_shape
        self.conv = []
        for k, cout in enumerate(cfg.conv_filters):
            self.conv.append((f"conv{k}", Conv2D(cin, cout, init, self.dtype, input_grad=k > 0,
                                                   sparse=k == 0, grid=(h, w))))
            self.conv.append((f"bn{k}", BatchNorm(cout, self.dtype)))
            self.conv.append((f"relu{k}", ReLU()))
            self.conv.append((f"drop{k}", Dropout(cfg.dropout, self.drop_rng)))
            cin = cout
        self.td = [
            ("td_dense", Dense(h * w * cin, cfg.td_dense_units, init, self.dtype)),
            ("td_relu", ReLU()),
            ("td_drop", Dropout(cfg.dropout, self.drop_rng)),
        ]
        cell = GRULayer if cfg.recurrent_kind == "GRU" else LSTMLayer
        self.rnn = []
        d = cfg.td_dense_units
        for k, n in enumerate(cfg.recurrent_units):
            self.rnn.append((f"rnn{k}", cell(d, n, init, self.dtype, cfg.dropout, self.drop_rng)))
            d = n
        self.head = ("out", Dense(d, cfg.n_classes, init, self.dtype))

    def layers(self):
        return [*self.conv, *self.td, *self.rnn, self.head]

    def parameters(self) -> dict:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.grads.items()}

    def buffers(self) -> dict:
        return {f"{name}.{k}": v for name, layer in self.layers() for k, v in layer.buffers().items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.parameters().values())

    def state(self) -> dict:
        return {k: v.copy() for k, v in {**self.parameters(), **self.buffers()}.items()}

    def load_state(self, state: dict) -> None:
        for name, layer in self.layers():
            for k in layer.params:
                layer.params[k][...] = state[f"{name}.{k}"]
            if isinstance(layer, BatchNorm):
                layer.running_mean = state[f"{name}.running_mean"].astype(self.dtype).copy()
                layer.running_var = state[f"{name}.running_var"].astype(self.dtype).copy()

    def forward(self, x, train=False):
        """Logits for a batch ``(B, S, 9, 9, W)``.

        A compact batch ``(B, S, k, W)`` from ``compact`` is accepted while
        ``input_support`` is active with the same k cells.
        """
        x = np.asarray(x, dtype=self.dtype)
        s_, h, w, win = self.cfg.input_shape
        support = self.conv[0][1].support
        if x.ndim == 4 and support is not None and x.shape[1:] == (s_, len(support), win):
            b, s = x.shape[:2]
            y = x.reshape(b * s, len(support), win)
        elif x.ndim == 5 and x.shape[1:] == self.cfg.input_shape:
            b, s = x.shape[:2]
            y = x.reshape(b * s, *x.shape[2:])
        else:
            raise ShapeError(f"expected (B, {', '.join(map(str, self.cfg.input_shape))}), got {x.shape}")
        for _, layer in self.conv:
            y = layer.forward(y, train)
        self._conv_shape = y.shape
        y = y.reshape(b, s, -1)
        for _, layer in self.td:
            y = layer.forward(y, train)
        for _, layer in self.rnn:
            y = layer.forward(y, train)
        self._seq_shape = y.shape
        return self.head[1].forward(y[:, -1], train)

    def backward(self, dlogits):
        dy = self.head[1].backward(dlogits)
        dseq = np.zeros(self._seq_shape, dy.dtype)
        dseq[:, -1] = dy
        for _, layer in reversed(self.rnn):
            dseq = layer.backward(dseq)
        for _, layer in reversed(self.td):
            dseq = layer.backward(dseq)
        dy = dseq.reshape(self._conv_shape)
        for _, layer in reversed(self.conv):
            dy = layer.backward(dy)
            if dy is None:
                break

    def occupied_cells(self, *arrays) -> np.ndarray:
        """Grid cells nonzero anywhere in ``arrays`` (each ``(B, S, 9, 9, W)``), as ``(k, 2)``."""
        cells = np.zeros(self.cfg.input_shape[1:3], dtype=bool)
        for a in arrays:
            if a is None:
                continue
            for i in range(0, len(a), 64):
                cells |= np.any(a[i:i + 64], axis=(0, 1, 4))
        return np.argwhere(cells)

    @staticmethod
    def compact(x, cells) -> np.ndarray:
        """Only the ``cells`` of a mesh batch: ``(B, S, 9, 9, W) -> (B, S, k, W)``."""
        return np.ascontiguousarray(np.asarray(x)[:, :, cells[:, 0], cells[:, 1], :])

    @contextlib.contextmanager
    def input_support(self, *arrays, cells=None):
        """Fix the first conv layer's occupied cells to the union over ``arrays``.

        Batches drawn from these arrays can then skip the per-batch scan.
        """
        conv0 = self.conv[0][1]
        if cells is None:
            cells = self.occupied_cells(*arrays)
        previous, conv0.support = conv0.support, cells
        try:
            yield
        finally:
            conv0.support = previous

    def predict_proba(self, x, batch_size=256, cells=None):
        """Class probabilities; pass ``cells`` when ``x`` is already compact."""
        if cells is None:
            cells = self.occupied_cells(x)
            x = self.compact(x, cells)
        with self.input_support(cells=cells):
            out = [softmax(self.forward(x[i:i + batch_size]).astype(np.float64))
                   for i in range(0, len(x), batch_size)]
        return np.concatenate(out)

    def predict(self, x, batch_size=256):
        return self.predict_proba(x, batch_size).argmax(axis=1)

    def evaluate(self, x, y, batch_size=256, cells=None):
        """Mean cross-entropy and accuracy (%) in inference mode."""
        p = self.predict_proba(x, batch_size, cells)
        loss = -np.log(np.clip(p[np.arange(len(y)), y], 1e-300, None)).mean()
        return float(loss), 100.0 * float((p.argmax(1) == y).mean())


def forward(net: Network, mesh, mode="infer") -> np.ndarray:
    """Class probabilities for one mesh sequence ``(S, 9, 9, W)``."""
    tensor = getattr(mesh, "tensor", mesh)
    logits = net.forward(np.asarray(tensor)[None], train=(mode == "train"))
    return softmax(logits.astype(np.float64))[0]


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_crr: list = field(default_factory=list)
    epoch_time: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    def to_dict(self):
        return asdict(self)


class Trainer:
    """Epoch-at-a-time minibatch RMSprop on mean softmax cross-entropy.

    ``train`` drives this to completion; stepping it directly lets two
    networks be trained in lockstep (for paired timing comparisons).
    """

    def __init__(self, net: Network, x, y, cfg: TrainConfig, x_val=None, y_val=None,
                 stop_loss: float | None = None):
        x = np.asarray(x)
        self.y = np.asarray(y, dtype=np.int64)
        if len(x) < 1 or len(x) != len(self.y):
            raise ArgumentError(f"need matching non-empty data and labels, got {len(x)} / {len(self.y)}")
        if x.ndim != 5:
            raise ShapeError(f"expected mesh batches (B, S, 9, 9, W), got {x.shape}")
        self.net, self.cfg, self.stop_loss = net, cfg, stop_loss
        self.has_val = x_val is not None and len(x_val) > 0
        # batches only ever touch the occupied cells, so keep just those
        self._cells = net.occupied_cells(x, x_val if self.has_val else None)
        self.x = net.compact(x, self._cells)
        self.x_val = net.compact(x_val, self._cells) if self.has_val else None
        self.y_val = y_val
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = RMSprop(cfg.lr, cfg.rho, cfg.eps)
        self.hist = TrainHistory()
        self.best, self.best_state, self.waited = np.inf, None, 0
        self.done = cfg.max_epochs <= 0

    @property
    def epoch(self) -> int:
        return len(self.hist.train_loss)

    def step(self) -> float:
        """Run one epoch; returns its mean training loss."""
        if self.done:
            raise ArgumentError("training already finished")
        net, cfg, x, y, hist = self.net, self.cfg, self.x, self.y, self.hist
        epoch = self.epoch
        with net.input_support(cells=self._cells):
            t0 = time.perf_counter()
            order = self.rng.permutation(len(x))
            total = 0.0
            for start in range(0, len(x), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                logits = net.forward(x[idx], train=True)
                loss, dlogits = softmax_cross_entropy(logits.astype(np.float64), y[idx])
                if not np.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch starting {start}",
                        {"epoch": epoch, "batch_start": int(start), "loss": repr(loss),
                         "finite_logits": int(np.isfinite(logits).sum()),
                         "max_abs_logit": float(np.abs(logits[np.isfinite(logits)]).max(initial=0.0)),
                         "lr": cfg.lr})
                net.backward(dlogits.astype(net.dtype))
                self.opt.step(net.parameters(), net.gradients())
                total += loss * len(idx)
            hist.train_loss.append(total / len(x))
            hist.epoch_time.append(time.perf_counter() - t0)
            if self.has_val:
                vloss, vcrr = net.evaluate(self.x_val, self.y_val, cells=self._cells)
                hist.val_loss.append(vloss)
                hist.val_crr.append(vcrr)
                if vloss < self.best - cfg.min_delta:
                    self.best, self.best_state, self.waited = vloss, net.state(), 0
                    hist.best_epoch = epoch
                else:
                    self.waited += 1
        logger.debug("epoch %d loss %.4f", epoch, hist.train_loss[-1])
        if self.stop_loss is not None and hist.train_loss[-1] < self.stop_loss:
            self.done = True
        elif self.has_val and self.waited >= cfg.patience:
            hist.stopped_early = True
            self.done = True
        elif self.epoch >= cfg.max_epochs:
            self.done = True
        return hist.train_loss[-1]

    def finish(self) -> TrainHistory:
        """Restore the best validation weights (if any) and return the history."""
        if self.best_state is not None:
            self.net.load_state(self.best_state)
        elif self.hist.best_epoch < 0:
            self.hist.best_epoch = self.epoch - 1
        return self.hist


def train(net: Network, x, y, cfg: TrainConfig, x_val=None, y_val=None,
          stop_loss: float | None = None) -> TrainHistory:
    """Minibatch RMSprop on mean softmax cross-entropy, backprop through time.

    With a validation set, stops after ``cfg.patience`` epochs without a
    new best validation loss (by more than ``cfg.min_delta``) and restores
    the best weights. ``stop_loss`` ends training once an epoch's mean
    training loss falls below it.
    """
    trainer = Trainer(net, x, y, cfg, x_val, y_val, stop_loss)
    while not trainer.done:
        trainer.step()
    return trainer.finish()
