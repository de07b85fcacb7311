"""Model assembly: the reference CNN, layer tagging and checkpoints.

Checkpoint layout (little-endian)::

    b"FOCTTACK"             8-byte magic
    uint32                  format version (1)
    uint64                  header length H
    H bytes                 UTF-8 JSON header
    payload                 raw array bytes, concatenated

The header holds ``config``, ``layers`` (kind and tags per layer id),
``metadata`` (free-form, e.g. clean accuracy and seed lineage) and
``arrays``: a list of ``{name, dtype, shape, offset, nbytes}`` with offsets
relative to the payload start. Arrays are named ``param/<param id>`` and
``buffer/<layer id>.running_mean`` / ``.running_var``.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from . import engine
from .errors import ConfigError, GraphError, PlanError
from .ops import BATCH_STATS, BatchNorm, Conv2d, Dense, Flatten, MaxPool2d, Op, Parameter, ReLU

MAGIC = b"FOCTTACK"
FORMAT_VERSION = 1

REPRESENTATION = "representation"
BN = "bn"
CLASSIFIER = "classifier"


@dataclass(frozen=True)
class LayerDescriptor:
    layer_id: int
    kind: str
    parameter_ids: tuple[str, ...]
    is_representation: bool
    is_classifier: bool

    @property
    def tag(self) -> str | None:
        if self.is_representation:
            return REPRESENTATION
        if self.is_classifier:
            return CLASSIFIER
        if self.kind == "batchnorm":
            return BN
        return None


@dataclass
class CNNConfig:
    input_size: int = 16
    in_channels: int = 1
    widths: tuple[int, ...] = (16, 32, 64)
    num_classes: int = 3
    kernel: int = 3
    classifier_hidden: tuple[int, ...] = ()
    seed: int = 0
    dtype: str = "float64"

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_size < 1 or self.in_channels < 1 or self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("input_size, in_channels must be positive and kernel odd")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError(f"invalid widths {self.widths}")
        if self.input_size >> len(self.widths) < 1:
            raise ConfigError(f"input {self.input_size} too small for {len(self.widths)} pooling blocks")
        if any(h < 1 for h in self.classifier_hidden):
            raise ConfigError("classifier hidden sizes must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")


class ModelSplit:
    """A feed-forward graph split into feature extractor and classifier.

    ``layers[:split]`` is the feature extractor, ``layers[split:]`` the
    classifier (the final dense stack).
    """

    def __init__(self, layers: list[Op], split: int, input_shape: tuple[int, ...],
                 config: CNNConfig | None = None):
        self.layers = layers
        self.split = split
        self.input_shape = tuple(input_shape)
        self.config = config
        engine.infer_shapes(layers, self.input_shape)
        tail = layers[split:]
        if not any(op.kind == "dense" for op in tail) or any(
                op.parameterized and op.kind != "dense" for op in tail):
            raise GraphError("classifier must be a non-empty dense stack")

    @property
    def g_s(self) -> list[Op]:
        return self.layers[:self.split]

    @property
    def h_s(self) -> list[Op]:
        return self.layers[self.split:]

    @property
    def L(self) -> int:
        return sum(op.parameterized for op in self.layers)

    @property
    def num_classes(self) -> int:
        return engine.infer_shapes(self.layers, self.input_shape)[-1][0]

    @property
    def dtype(self) -> np.dtype:
        return next(engine.graph_params(self.layers)).data.dtype

    def descriptors(self) -> list[LayerDescriptor]:
        out = []
        for i, op in enumerate(self.layers):
            in_g = i < self.split
            rep = in_g and op.kind in ("dense", "conv2d")
            out.append(LayerDescriptor(op.layer_id, op.kind, tuple(p.id for p in op.params.values()),
                                       rep, (not in_g) and op.parameterized))
        return out

    def layer(self, layer_id: int) -> Op:
        if not 1 <= layer_id <= len(self.layers):
            raise PlanError(f"no layer {layer_id}")
        return self.layers[layer_id - 1]

    def ids_with_tag(self, tag: str) -> list[int]:
        return [d.layer_id for d in self.descriptors() if d.tag == tag]

    @property
    def representation_ids(self) -> list[int]:
        return self.ids_with_tag(REPRESENTATION)

    @property
    def bn_ids(self) -> list[int]:
        return self.ids_with_tag(BN)

    @property
    def classifier_ids(self) -> list[int]:
        return self.ids_with_tag(CLASSIFIER)

    def parameters(self) -> list[Parameter]:
        return list(engine.graph_params(self.layers))

    def param(self, pid: str) -> Parameter:
        for p in engine.graph_params(self.layers):
            if p.id == pid:
                return p
        raise KeyError(pid)

    def param_count(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def set_trainable(self, layer_ids: Iterable[int]) -> frozenset[str]:
        """Make exactly the parameters of ``layer_ids`` trainable."""
        ids = set(layer_ids)
        for lid in ids:
            self.layer(lid)
        for op in self.layers:
            for p in op.params.values():
                p.trainable = op.layer_id in ids
        return engine.trainable_ids(self.layers)

    def forward(self, x: np.ndarray, **kw):
        return engine.forward(self.layers, np.asarray(x, dtype=self.dtype), **kw)

    def predict(self, x: np.ndarray, bn_mode: str = BATCH_STATS) -> np.ndarray:
        out, _ = self.forward(x, trainable=(), bn_mode=bn_mode)
        return out

    def state(self) -> dict[str, np.ndarray]:
        st = {f"param/{p.id}": p.data for p in self.parameters()}
        for op in self.layers:
            if isinstance(op, BatchNorm):
                st[f"buffer/{op.layer_id}.running_mean"] = op.running_mean
                st[f"buffer/{op.layer_id}.running_var"] = op.running_var
        return st

    def load_state(self, st: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            p.data = np.array(st[f"param/{p.id}"], copy=True)
        for op in self.layers:
            if isinstance(op, BatchNorm):
                op.running_mean = np.array(st[f"buffer/{op.layer_id}.running_mean"], copy=True)
                op.running_var = np.array(st[f"buffer/{op.layer_id}.running_var"], copy=True)

    def clone(self) -> "ModelSplit":
        return copy.deepcopy(self)


class FrozenModel:
    """Read-only snapshot of a model; its arrays are marked non-writeable."""

    def __init__(self, model: ModelSplit):
        self._model = model.clone()
        for p in self._model.parameters():
            p.trainable = False
            p.data.flags.writeable = False
        for op in self._model.layers:
            if isinstance(op, BatchNorm):
                op.running_mean.flags.writeable = False
                op.running_var.flags.writeable = False

    @property
    def model(self) -> ModelSplit:
        return self._model

    def forward(self, x: np.ndarray, *, bn_mode: str = BATCH_STATS, taps: Iterable[int] = ()):
        out, tape = engine.forward(self._model.layers, np.asarray(x, dtype=self._model.dtype),
                                   trainable=(), bn_mode=bn_mode, update_stats=False, taps=taps)
        return out, tape.taps

    def __call__(self, x: np.ndarray, bn_mode: str = BATCH_STATS) -> np.ndarray:
        return self.forward(x, bn_mode=bn_mode)[0]


def snapshot_frozen_reference(model: ModelSplit) -> FrozenModel:
    return FrozenModel(model)


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_reference_cnn(config: CNNConfig | None = None) -> ModelSplit:
    """[conv-bn-relu-pool] x len(widths) -> flatten -> dense classifier."""
    cfg = config or CNNConfig()
    cfg.validate()
    dt = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    layers: list[Op] = []
    c, size, k = cfg.in_channels, cfg.input_size, cfg.kernel

    def nid() -> int:
        return len(layers) + 1

    for w in cfg.widths:
        layers.append(Conv2d(nid(), _he(rng, (w, c, k, k), c * k * k, dt), np.zeros(w, dt)))
        layers.append(BatchNorm(nid(), w, dtype=dt))
        layers.append(ReLU(nid()))
        layers.append(MaxPool2d(nid()))
        c, size = w, size // 2
    layers.append(Flatten(nid()))
    split = len(layers)
    d = c * size * size
    for h in cfg.classifier_hidden:
        layers.append(Dense(nid(), _he(rng, (d, h), d, dt), np.zeros(h, dt)))
        layers.append(ReLU(nid()))
        d = h
    layers.append(Dense(nid(), _he(rng, (d, cfg.num_classes), d, dt), np.zeros(cfg.num_classes, dt)))
    return ModelSplit(layers, split, (cfg.in_channels, cfg.input_size, cfg.input_size), cfg)


def save_checkpoint(model: ModelSplit, path: str | Path, metadata: dict | None = None) -> None:
    arrays = model.state()
    entries, offset = [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": int(a.nbytes)})
        offset += a.nbytes
    header = {
        "format": "foctta-checkpoint",
        "version": FORMAT_VERSION,
        "config": _config_dict(model.config),
        "split": model.split,
        "input_shape": list(model.input_shape),
        "layers": [asdict(d) | {"tag": d.tag} for d in model.descriptors()],
        "metadata": metadata or {},
        "arrays": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for e in entries:
            a = np.ascontiguousarray(arrays[e["name"]])
            fh.write(a.astype(np.dtype(e["dtype"]), copy=False).tobytes())


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ConfigError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<IQ", raw[8:20])
    if version != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = raw[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, arrays


def load_checkpoint(path: str | Path) -> tuple[ModelSplit, dict]:
    """Rebuild the model from its stored config and restore every array."""
    header, arrays = read_checkpoint(path)
    cfg = header["config"]
    cfg = CNNConfig(**{**cfg, "widths": tuple(cfg["widths"]),
                       "classifier_hidden": tuple(cfg["classifier_hidden"])})
    model = build_reference_cnn(cfg)
    model.load_state(arrays)
    return model, header["metadata"]


def _config_dict(cfg: CNNConfig | None) -> dict:
    if cfg is None:
        raise ConfigError("only models built from a CNNConfig can be checkpointed")
    d = asdict(cfg)
    d["widths"] = list(cfg.widths)
    d["classifier_hidden"] = list(cfg.classifier_hidden)
    return d
