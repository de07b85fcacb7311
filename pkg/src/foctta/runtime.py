"""Online continual adaptation loop and baseline strategies."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import engine, losses
from .data import DomainStream, to_nchw
from .engine import Loss
from .errors import ConfigError, NumericError
from .memory import MemoryReport, measure_cost, predict_cost
from .nn import FrozenModel, ModelSplit, snapshot_frozen_reference
from .ops import BATCH_STATS, BN_MODES, RUNNING_STATS
from .optim import Adam
from .warmup import AdaptationPlan

log = logging.getLogger(__name__)

SOURCE = "source"
FOCTTA = "focta"
TENT = "tent-all-bn"
FULL = "full-finetune"
RANDOM_K = "random-k"
MODES = (SOURCE, FOCTTA, TENT, FULL, RANDOM_K)

# Updating a conv layer under frozen running statistics drifts into a single-class
# collapse on the reference benchmark; every adapting mode therefore normalizes
# with batch statistics unless told otherwise.
DEFAULT_BN_MODE = {SOURCE: RUNNING_STATS, FOCTTA: BATCH_STATS, TENT: BATCH_STATS,
                   FULL: BATCH_STATS, RANDOM_K: BATCH_STATS}

LOG_FIELDS = ("step", "domain", "severity", "batch_error", "kept_fraction", "L_ent", "L_reg", "L_total")


@dataclass
class AdaptOptions:
    bn_mode: str | None = None          # None: the plan's mode (focta, random-k) or the per-mode default
    filter_entropy: bool | None = None  # None: on for every mode except tent-all-bn
    regularize: bool | None = None      # None: on for focta, random-k and full-finetune
    reg_target: str = "features"        # or "logits"
    seed: int = 0                       # random-k layer draw
    lr_reference_batch: int | None = 64  # lr scales by B / ref for B < ref; None disables

    def resolve(self, mode: str, plan: AdaptationPlan | None = None) -> tuple[str, bool, bool]:
        bn = self.bn_mode
        if bn is None:
            bn = plan.bn_mode if plan is not None and mode in (FOCTTA, RANDOM_K) else DEFAULT_BN_MODE[mode]
        if bn not in BN_MODES:
            raise ConfigError(f"unknown BN mode {bn!r}")
        filt = mode != TENT if self.filter_entropy is None else self.filter_entropy
        reg = mode in (FOCTTA, RANDOM_K, FULL) if self.regularize is None else self.regularize
        if self.reg_target not in ("features", "logits"):
            raise ConfigError(f"reg_target must be 'features' or 'logits', got {self.reg_target!r}")
        return bn, filt, reg


@dataclass
class RunResult:
    mode: str
    trainable_layers: list[int]
    domain_errors: list[tuple[str, int, float]]
    memory: MemoryReport
    log_rows: list[dict] = field(default_factory=list)

    @property
    def average_error(self) -> float:
        return float(np.mean([e for _, _, e in self.domain_errors]))

    def summary(self) -> dict:
        return {
            "mode": self.mode,
            "trainable_layers": self.trainable_layers,
            "domains": [{"domain": d, "severity": s, "error_pct": round(e, 6)} for d, s, e in self.domain_errors],
            "average_error_pct": round(self.average_error, 6),
            "memory": self.memory.to_dict(),
        }

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=LOG_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in self.log_rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def trainable_layers(model: ModelSplit, mode: str, plan: AdaptationPlan | None, seed: int = 0) -> list[int]:
    """Layer ids a strategy updates."""
    if mode == SOURCE:
        return []
    if mode == TENT:
        return model.bn_ids
    if mode == FULL:
        return [op.layer_id for op in model.layers if op.parameterized]
    if plan is None:
        raise ConfigError(f"mode {mode!r} needs an adaptation plan")
    if mode == FOCTTA:
        plan.validate(model)
        return sorted(plan.selected)
    if mode == RANDOM_K:
        reps = model.representation_ids
        rng = np.random.default_rng([seed, 0x7A4D])
        return sorted(int(i) for i in rng.choice(reps, size=plan.M, replace=False))
    raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")


def regularizer(live_taps: dict[int, np.ndarray], frozen_taps: dict[int, np.ndarray],
                layers: Sequence[int]) -> tuple[float, dict[int, np.ndarray]]:
    """Sum over layers of the mean absolute feature difference, with per-tap gradients."""
    total, grads = 0.0, {}
    for lid in layers:
        v, g = losses.l1_distance(live_taps[lid], frozen_taps[lid])
        total += v
        grads[lid] = g
    return total, grads


def feature_regularizer(live: ModelSplit, frozen: FrozenModel, x: np.ndarray, plan: AdaptationPlan) -> float:
    """Regularizer value for one batch, forwarding through both models."""
    _, tape = live.forward(x, trainable=(), bn_mode=plan.bn_mode, taps=plan.selected)
    _, ftaps = frozen.forward(x, bn_mode=plan.bn_mode, taps=plan.selected)
    return regularizer(tape.taps, ftaps, plan.selected)[0]


def adapt_stream(model: ModelSplit, stream: DomainStream, mode: str, plan: AdaptationPlan | None = None,
                 options: AdaptOptions | None = None, frozen: FrozenModel | None = None) -> RunResult:
    """Predict-then-adapt over every batch of ``stream``; the model is updated in place."""
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
    opts = options or AdaptOptions()
    bn_mode, filt, reg_on = opts.resolve(mode, plan)
    layers = trainable_layers(model, mode, plan, opts.seed)
    trainable = model.set_trainable(layers)
    num_classes = model.num_classes
    h0_default = 0.4 * math.log(num_classes)
    h0 = (plan.h0 if plan is not None and plan.h0 is not None else h0_default) if filt else None
    lam = plan.lam if plan is not None else 1.0
    lr = plan.lr if plan is not None else 1e-3
    if opts.lr_reference_batch and stream.batch_size < opts.lr_reference_batch:
        lr = lr * stream.batch_size / opts.lr_reference_batch
    reg_layers = [lid for lid in layers if lid in model.representation_ids] if reg_on else []
    use_reg = reg_on and (reg_layers or opts.reg_target == "logits") and trainable
    if use_reg and frozen is None:
        frozen = snapshot_frozen_reference(model)
    opt = Adam([p for p in model.parameters() if p.id in trainable], lr=lr) if trainable else None

    errors: dict[int, list[int]] = {}
    rows: list[dict] = []
    mem: MemoryReport | None = None
    empty = True
    for step, batch in enumerate(stream):
        empty = False
        x = to_nchw(batch.images).astype(model.dtype)
        taps = reg_layers if use_reg and opts.reg_target == "features" else ()
        out, tape = model.forward(x, trainable=trainable, bn_mode=bn_mode, taps=taps)
        if mem is None:
            mem = measure_cost(tape, predict_cost(model, layers, len(x), bn_mode=bn_mode))
        wrong = int((out.argmax(axis=1) != batch.labels).sum())
        seg = errors.setdefault(batch.segment, [0, 0])
        seg[0] += wrong
        seg[1] += len(x)
        l_ent = l_reg = 0.0
        kept_frac = 0.0
        if trainable:
            l_ent, dlogits, kept = losses.entropy_loss(out, h0)
            kept_frac = float(kept.mean())
            loss = Loss(l_ent, {tape.output_id: dlogits})
            if use_reg:
                if opts.reg_target == "features":
                    _, ftaps = frozen.forward(x, bn_mode=bn_mode, taps=taps)
                    l_reg, rg = regularizer(tape.taps, ftaps, reg_layers)
                    seeds = {model.layers.index(model.layer(lid)) + 1: g for lid, g in rg.items()}
                else:
                    l_reg, g = losses.l1_distance(out, frozen(x, bn_mode=bn_mode))
                    seeds = {tape.output_id: g}
                loss = loss + lam * Loss(l_reg, seeds)
            if not (math.isfinite(l_ent) and math.isfinite(l_reg)):
                raise NumericError(f"non-finite loss at step {step} (domain {batch.domain}, "
                                   f"severity {batch.severity}): L_ent={l_ent} L_reg={l_reg}")
            if kept.any():
                opt.step(engine.backward(tape, loss))
        rows.append({"step": step, "domain": batch.domain, "severity": batch.severity,
                     "batch_error": wrong / len(x), "kept_fraction": kept_frac,
                     "L_ent": l_ent, "L_reg": l_reg, "L_total": l_ent + lam * l_reg})
    if empty:
        raise ConfigError("empty stream")
    model.set_trainable(())
    domain_errors = [(stream.segments[i][0], stream.segments[i][1], 100.0 * w / n)
                     for i, (w, n) in sorted(errors.items())]
    return RunResult(mode, layers, domain_errors, mem, rows)
