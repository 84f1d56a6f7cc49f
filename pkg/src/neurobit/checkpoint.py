"""Versioned binary container for trained models.

Layout (little-endian)::

    16 bytes   magic  b"NEUROBIT-CKPT\\0\\0\\0"
    u32        version (1)
    u32        kind    (0 neural, 1 svm, 2 mahalanobis)
    u32        header length in bytes
    ...        header, UTF-8 JSON: config, seed, epoch, meta, arrays [{name, shape}]
    ...        arrays as float32, in header order
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import LoadError

MAGIC = b"NEUROBIT-CKPT\x00\x00\x00"
VERSION = 1
KINDS = {"neural": 0, "svm": 1, "mahalanobis": 2}
_PREFIX = struct.Struct("<16s3I")


def save_checkpoint(path, kind: str, arrays: dict, *, config=None, seed=None, epoch=None,
                    meta=None) -> Path:
    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind {kind!r}")
    header = {
        "config": config, "seed": seed, "epoch": epoch, "meta": meta or {},
        "arrays": [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, VERSION, KINDS[kind], len(blob)))
        fh.write(blob)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())
    return path


def load_checkpoint(path) -> tuple[str, dict, dict]:
    """Returns ``(kind, header, arrays)``; arrays come back as float32."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise LoadError(f"{path}: truncated checkpoint", field="header")
    magic, version, kind_id, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"{path}: bad magic", field="magic")
    if version != VERSION:
        raise LoadError(f"{path}: unsupported checkpoint version {version}", field="version")
    kinds = {v: k for k, v in KINDS.items()}
    if kind_id not in kinds:
        raise LoadError(f"{path}: unknown kind tag {kind_id}", field="kind")
    header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen])
    offset = _PREFIX.size + hlen
    arrays = {}
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        end = offset + 4 * count
        if end > len(raw):
            raise LoadError(f"{path}: array {spec['name']} runs past end of file", field=spec["name"])
        arrays[spec["name"]] = np.frombuffer(raw[offset:end], dtype="<f4").reshape(spec["shape"]).copy()
        offset = end
    if offset != len(raw):
        raise LoadError(f"{path}: {len(raw) - offset} trailing bytes", field="payload")
    return kinds[kind_id], header, arrays


def save_network(path, net, epoch=None) -> Path:
    return save_checkpoint(path, "neural", net.state(), config=net.cfg.to_dict(), seed=net.seed,
                           epoch=epoch)


def load_network(path):
    from .nn.network import Network, NetworkConfig

    kind, header, arrays = load_checkpoint(path)
    if kind != "neural":
        raise LoadError(f"{path}: holds a {kind} model, not a network", field="kind")
    net = Network(NetworkConfig(**header["config"]), seed=header["seed"] or 0)
    net.load_state(arrays)
    return net


def save_svm(path, model) -> Path:
    arrays = {"classes": model.classes, "W": model.W, "b": model.b,
              "mean": model.standardizer.mean, "std": model.standardizer.std}
    return save_checkpoint(path, "svm", arrays, config={"C": model.C, "kernel": model.kernel,
                                                        "pairs": [list(p) for p in model.pairs]})


def load_svm(path):
    from .baselines import SvmModel
    from .signal_prep import Standardizer

    kind, header, a = load_checkpoint(path)
    if kind != "svm":
        raise LoadError(f"{path}: holds a {kind} model, not an SVM", field="kind")
    cfg = header["config"]
    return SvmModel(a["classes"].astype(np.int64), [tuple(p) for p in cfg["pairs"]],
                    a["W"].astype(np.float64), a["b"].astype(np.float64), cfg["C"],
                    Standardizer(a["mean"].astype(np.float64), a["std"].astype(np.float64)),
                    cfg["kernel"])


def save_mahalanobis(path, model) -> Path:
    arrays = {"classes": model.classes, "means": model.means, "inv_cov": model.inv_cov}
    return save_checkpoint(path, "mahalanobis", arrays, config={"kind": model.kind})


def load_mahalanobis(path):
    from .baselines import MahalanobisModel

    kind, header, a = load_checkpoint(path)
    if kind != "mahalanobis":
        raise LoadError(f"{path}: holds a {kind} model, not a Mahalanobis model", field="kind")
    return MahalanobisModel(a["classes"].astype(np.int64), a["means"].astype(np.float64),
                            a["inv_cov"].astype(np.float64), header["config"]["kind"])
