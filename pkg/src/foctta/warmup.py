"""Warm-up profiling: rank representation layers by gradient norm and pick the top ones."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import engine, losses
from .data import DEFAULT_RECIPE, Dataset, augment_batch, to_nchw
from .engine import Loss
from .errors import ConfigError, PlanError, ProfilingError
from .nn import ModelSplit
from .ops import BATCH_STATS
from .optim import Adam

log = logging.getLogger(__name__)

GRAD_NORM = "grad-norm"
L1_NORM = "l1-norm"
WEIGHT_NORM = "weight-norm"
METRICS = (GRAD_NORM, L1_NORM, WEIGHT_NORM)

DEFAULT_ALPHA = 0.1
DEFAULT_LAMBDA = 1.0
DEFAULT_H0_FACTOR = 0.4
WARMUP_LR = 0.00025
ADAPT_LR = 0.001


@dataclass
class ImportanceVector:
    layer_ids: list[int]
    scores: list[float]
    metric: str
    batches_seen: int = 1
    normalization: str = "log"

    def __post_init__(self) -> None:
        if len(self.layer_ids) != len(self.scores):
            raise ProfilingError("one score per representation layer required")
        if self.metric not in METRICS:
            raise ConfigError(f"unknown metric {self.metric!r}")

    def normalized(self) -> list[float]:
        """Scores shifted so the maximum is 0 (log-scale metrics only)."""
        if self.normalization == "raw":
            vals = [math.log(s) if s > 0 else -math.inf for s in self.scores]
        else:
            vals = list(self.scores)
        top = max(vals)
        return [v - top if math.isfinite(v) else -math.inf for v in vals]

    def ranking(self) -> list[int]:
        """Layer ids from most to least important; ties go to the smaller id."""
        def key(i: int):
            s = self.scores[i]
            return (-(s if not math.isnan(s) else -math.inf), self.layer_ids[i])

        return [self.layer_ids[i] for i in sorted(range(len(self.scores)), key=key)]

    def to_dict(self) -> dict:
        return {"layer_ids": self.layer_ids,
                "scores": [s if math.isfinite(s) else None for s in self.scores],
                "metric": self.metric, "batches_seen": self.batches_seen,
                "normalization": self.normalization}

    @classmethod
    def from_dict(cls, d: dict) -> "ImportanceVector":
        scores = [-math.inf if s is None else float(s) for s in d["scores"]]
        return cls(list(d["layer_ids"]), scores, d["metric"], d["batches_seen"], d["normalization"])

    def table(self) -> str:
        norm = self.normalized()
        rank = {lid: r for r, lid in enumerate(self.ranking(), start=1)}
        lines = [f"{'rank':>4}  {'layer':>5}  {'score':>12}  {'normalized':>10}  bar",
                 f"{'-' * 4}  {'-' * 5}  {'-' * 12}  {'-' * 10}  ---"]
        for lid in self.ranking():
            i = self.layer_ids.index(lid)
            n = norm[i]
            bar = "#" * max(1, int(round(20 * math.exp(n)))) if math.isfinite(n) else ""
            lines.append(f"{rank[lid]:>4}  {lid:>5}  {self.scores[i]:>12.6g}  {n:>10.4f}  {bar}")
        return "\n".join(lines)


@dataclass
class AdaptationPlan:
    selected: list[int]
    alpha: float = DEFAULT_ALPHA
    lam: float = DEFAULT_LAMBDA
    h0: float | None = None
    batch_size: int = 64
    lr: float = ADAPT_LR
    bn_mode: str = BATCH_STATS
    metric: str = GRAD_NORM
    candidates: list[int] = field(default_factory=list)

    @property
    def M(self) -> int:
        return len(self.selected)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationPlan":
        return cls(**d)

    def validate(self, model: ModelSplit) -> None:
        reps = set(model.representation_ids)
        bad = [lid for lid in self.selected if lid not in reps]
        if bad:
            raise PlanError(f"plan selects non-representation layers {bad}")


def num_selected(alpha: float, num_layers: int) -> int:
    if not 0 < alpha <= 1:
        raise ConfigError(f"alpha must be in (0, 1], got {alpha}")
    return max(1, math.ceil(alpha * num_layers))


def importance_from_norms(norms: np.ndarray) -> np.ndarray:
    """Log of the mean per-batch gradient norm, per column; -inf where all norms are zero."""
    norms = np.asarray(norms, dtype=np.float64)
    if norms.ndim != 2 or norms.shape[0] == 0:
        raise ProfilingError("need at least one batch of gradient norms")
    mean = norms.mean(axis=0)
    with np.errstate(divide="ignore"):
        return np.where(mean > 0, np.log(mean), -np.inf)


def layer_grad_norm(grads: dict[str, np.ndarray], param_ids: Sequence[str], norm: str = "L2") -> float:
    flat = np.concatenate([grads[p].ravel() for p in param_ids]).astype(np.float64)
    if norm == "L2":
        return float(np.sqrt((flat * flat).sum()))
    if norm == "L1":
        return float(np.abs(flat).sum())
    raise ConfigError(f"norm must be L1 or L2, got {norm!r}")


def warmup(model: ModelSplit, source: Dataset, recipe: Sequence[str] = DEFAULT_RECIPE, epochs: int = 1,
           lr: float = WARMUP_LR, seed: int = 0, batch_size: int = 64, norm: str = "L2",
           keep_weights: bool = False, bn_mode: str = BATCH_STATS) -> ImportanceVector:
    """Fine-tune the feature extractor on augmented source data and score its layers.

    The classifier stays frozen. BN running statistics are not updated. Unless
    ``keep_weights`` is set, the model is restored to its entry state.
    """
    if epochs < 1 or len(source) == 0:
        raise ProfilingError("warm-up needs at least one batch")
    saved = None if keep_weights else {k: v.copy() for k, v in model.state().items()}
    reps = model.representation_ids
    g_ids = [op.layer_id for op in model.g_s if op.parameterized]
    trainable = model.set_trainable(g_ids)
    opt = Adam([p for p in model.parameters() if p.id in trainable], lr=lr)
    rng = np.random.default_rng([seed, 0x3A])
    rows = []
    for epoch in range(epochs):
        order = rng.permutation(len(source))
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            x = to_nchw(augment_batch(source.images[idx], recipe, int(rng.integers(2**31))))
            out, tape = model.forward(x, trainable=trainable, bn_mode=bn_mode)
            value, grad = losses.cross_entropy(out, source.labels[idx])
            grads = engine.backward(tape, Loss(value, {tape.output_id: grad}))
            rows.append([layer_grad_norm(grads, [p.id for p in model.layer(lid).params.values()], norm)
                         for lid in reps])
            opt.step(grads)
    if not rows:
        raise ProfilingError("warm-up produced zero batches")
    scores = importance_from_norms(np.array(rows))
    model.set_trainable(())
    if saved is not None:
        model.load_state(saved)
    log.info("warm-up over %d batches: %s", len(rows), dict(zip(reps, scores.round(4))))
    return ImportanceVector(reps, [float(s) for s in scores], GRAD_NORM, len(rows), "log")


def score_l1(model: ModelSplit) -> ImportanceVector:
    reps = model.representation_ids
    scores = [float(np.abs(model.layer(lid).params["weight"].data).mean()) for lid in reps]
    return ImportanceVector(reps, scores, L1_NORM, 1, "raw")


def score_weight_norm(model: ModelSplit) -> ImportanceVector:
    reps = model.representation_ids
    scores = [float(np.linalg.norm(model.layer(lid).params["weight"].data.astype(np.float64).ravel()))
              for lid in reps]
    return ImportanceVector(reps, scores, WEIGHT_NORM, 1, "raw")


def select_topk(scores: ImportanceVector, alpha: float = DEFAULT_ALPHA, **plan_fields) -> AdaptationPlan:
    """Plan training the ``max(1, ceil(alpha * L_rep))`` highest-scoring layers."""
    m = num_selected(alpha, len(scores.layer_ids))
    selected = sorted(scores.ranking()[:m])
    return AdaptationPlan(selected=selected, alpha=alpha, metric=scores.metric,
                          candidates=list(scores.layer_ids), **plan_fields)
