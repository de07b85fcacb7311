"""Experiment configuration: one JSON file, typed sections, stable hashing."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import AUGMENTATIONS, CORRUPTIONS, DEFAULT_RECIPE, IDENTITY
from .errors import ConfigError
from .nn import CNNConfig
from .ops import BN_MODES
from .runtime import MODES
from .warmup import (ADAPT_LR, DEFAULT_ALPHA, DEFAULT_H0_FACTOR, DEFAULT_LAMBDA, METRICS,
                     WARMUP_LR, GRAD_NORM)

SWEEP_BATCH_SIZES = (64, 32, 16, 8, 4)


@dataclass
class DataConfig:
    n_train: int = 2400
    n_test: int = 600
    num_classes: int = 10


@dataclass
class ModelConfig:
    input_size: int = 16
    widths: tuple[int, ...] = (16, 32, 64)
    kernel: int = 3
    dtype: str = "float32"


@dataclass
class PretrainConfig:
    epochs: int = 6
    lr: float = 2e-3
    batch_size: int = 64
    recipe: tuple[str, ...] = ("pad-crop", "hflip")
    label_smoothing: float = 0.1
    accuracy_floor: float = 0.90


@dataclass
class WarmupConfig:
    recipe: tuple[str, ...] = DEFAULT_RECIPE
    alpha: float = DEFAULT_ALPHA
    lr: float = WARMUP_LR
    epochs: int = 1
    batch_size: int = 64
    norm: str = "L2"
    metric: str = GRAD_NORM
    keep_weights: bool = False


@dataclass
class AdaptConfig:
    mode: str = "focta"
    batch_size: int = 64
    lr: float = ADAPT_LR
    lam: float = DEFAULT_LAMBDA
    h0_factor: float = DEFAULT_H0_FACTOR
    bn_mode: str | None = None
    reg_target: str = "features"
    lr_reference_batch: int | None = 64
    severity: int = 5
    corruptions: tuple[str, ...] = CORRUPTIONS
    samples_per_segment: int = 500
    stream_seed_offset: int = 1000


@dataclass
class SweepConfig:
    batch_sizes: tuple[int, ...] = SWEEP_BATCH_SIZES
    modes: tuple[str, ...] = ("focta", "tent-all-bn")


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs"

    # ---- construction -------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        kw: dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            sub = _SECTIONS.get(f.name)
            kw[f.name] = _section(sub, v, f.name) if sub else v
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(raw)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict[str, Any]:
        return json.loads(json.dumps(asdict(self)))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    # ---- hashing ------------------------------------------------------
    def hash(self, *sections: str) -> str:
        """sha256 over the canonical JSON of the whole config or of some sections.

        ``out_dir`` never enters the hash: moving a run does not change its identity.
        """
        d = self.to_dict()
        d.pop("out_dir")
        if sections:
            d = {k: d[k] for k in sections}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode("utf-8")).hexdigest()

    def model_hash(self) -> str:
        """Identity of a pretrained checkpoint."""
        return self.hash("seed", "data", "model", "pretrain")

    # ---- derived objects ----------------------------------------------
    def cnn_config(self) -> CNNConfig:
        m = self.model
        return CNNConfig(input_size=m.input_size, widths=tuple(m.widths), num_classes=self.data.num_classes,
                         kernel=m.kernel, seed=self.seed, dtype=m.dtype)

    @property
    def stream_seed(self) -> int:
        return self.seed + self.adapt.stream_seed_offset

    def validate(self) -> None:
        d, p, w, a, s = self.data, self.pretrain, self.warmup, self.adapt, self.sweep
        if d.num_classes < 2:
            raise ConfigError(f"data.num_classes must be >= 2, got {d.num_classes}")
        if d.n_train < 1 or d.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be positive")
        self.cnn_config().validate()
        for name, recipe in (("pretrain.recipe", p.recipe), ("warmup.recipe", w.recipe)):
            bad = [r for r in recipe if r not in AUGMENTATIONS]
            if bad:
                raise ConfigError(f"{name}: unknown augmentations {bad}")
        if p.epochs < 1 or p.batch_size < 1 or p.lr <= 0:
            raise ConfigError("pretrain epochs, batch_size and lr must be positive")
        if not 0 <= p.label_smoothing < 1:
            raise ConfigError("pretrain.label_smoothing must be in [0, 1)")
        if not 0 < w.alpha <= 1:
            raise ConfigError(f"warmup.alpha must be in (0, 1], got {w.alpha}")
        if w.epochs < 1 or w.lr <= 0 or w.batch_size < 1:
            raise ConfigError("warmup epochs, batch_size and lr must be positive")
        if w.norm not in ("L1", "L2"):
            raise ConfigError(f"warmup.norm must be L1 or L2, got {w.norm!r}")
        if w.metric not in METRICS:
            raise ConfigError(f"warmup.metric must be one of {METRICS}")
        if a.mode not in MODES:
            raise ConfigError(f"adapt.mode must be one of {MODES}, got {a.mode!r}")
        if a.batch_size < 1 or a.lr <= 0 or a.lam < 0 or a.h0_factor <= 0:
            raise ConfigError("adapt batch_size, lr, h0_factor must be positive and lam non-negative")
        if a.bn_mode is not None and a.bn_mode not in BN_MODES:
            raise ConfigError(f"adapt.bn_mode must be one of {BN_MODES} or null")
        if a.reg_target not in ("features", "logits"):
            raise ConfigError("adapt.reg_target must be 'features' or 'logits'")
        if not 1 <= a.severity <= 5:
            raise ConfigError(f"adapt.severity must be in 1..5, got {a.severity}")
        bad = [c for c in a.corruptions if c not in CORRUPTIONS and c != IDENTITY]
        if bad or not a.corruptions:
            raise ConfigError(f"adapt.corruptions: unknown or empty {bad}")
        if a.samples_per_segment < 1:
            raise ConfigError("adapt.samples_per_segment must be positive")
        if not s.batch_sizes or any(b < 1 for b in s.batch_sizes):
            raise ConfigError("sweep.batch_sizes must be positive")
        bad = [m for m in s.modes if m not in MODES]
        if bad:
            raise ConfigError(f"sweep.modes: unknown {bad}")


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "pretrain": PretrainConfig,
             "warmup": WarmupConfig, "adapt": AdaptConfig, "sweep": SweepConfig}


def _section(cls, value: Any, name: str):
    if not isinstance(value, dict):
        raise ConfigError(f"config section {name!r} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(value) - set(names)
    if unknown:
        raise ConfigError(f"unknown keys in {name!r}: {sorted(unknown)}")
    defaults = cls()
    kw = {}
    for k, v in value.items():
        v = tuple(v) if isinstance(v, list) else v
        _check_type(f"{name}.{k}", getattr(defaults, k), v)
        kw[k] = v
    return cls(**kw)


def _check_type(key: str, default: Any, v: Any) -> None:
    if v is None or default is None:
        return
    if isinstance(default, bool):
        ok = isinstance(v, bool)
    elif isinstance(default, int):
        ok = isinstance(v, int) and not isinstance(v, bool)
    elif isinstance(default, float):
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
    else:
        ok = isinstance(v, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {type(v).__name__}")
