"""Softmax-based losses. Each returns ``(value, gradient w.r.t. its input)``."""
from __future__ import annotations

import math

import numpy as np

from . import engine
from .errors import NumericError


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p: np.ndarray) -> float:
    """Shannon entropy in nats of one probability vector; 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    if engine.DEBUG and (np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6):
        raise NumericError(f"not a probability vector (sum={p.sum()!r})")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_threshold(num_classes: int, factor: float = 0.4) -> float:
    return factor * math.log(num_classes)


def softmax_entropy(logits: np.ndarray) -> np.ndarray:
    """Per-row entropy of softmax(logits), computed stably from logits."""
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    return -(np.exp(logp) * logp).sum(axis=-1)


def entropy_loss(logits: np.ndarray, h0: float | None) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean prediction entropy over samples whose entropy is below ``h0``.

    ``h0=None`` disables the filter (every sample kept). Returns
    ``(loss, dloss/dlogits, kept mask)``; with nothing kept the loss and
    gradient are zero.
    """
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1)
    kept = np.ones(h.shape, bool) if h0 is None else h < h0
    k = int(kept.sum())
    if k == 0:
        return 0.0, np.zeros_like(logits), kept
    loss = float(h[kept].sum() / k)
    # dH/dz_j = -p_j (log p_j + H)
    dh = -p * (logp + h[:, None])
    grad = np.where(kept[:, None], dh / k, np.zeros((), logits.dtype))
    return loss, grad.astype(logits.dtype), kept


def cross_entropy(logits: np.ndarray, labels: np.ndarray, smoothing: float = 0.0) -> tuple[float, np.ndarray]:
    """Mean cross-entropy against (optionally smoothed) one-hot targets."""
    z = logits - logits.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    n, c = logits.shape
    target = np.full(logits.shape, smoothing / c)
    target[np.arange(n), labels] += 1.0 - smoothing
    loss = float(-(target * logp).sum() / n)
    return loss, ((np.exp(logp) - target) / n).astype(logits.dtype)


def l1_distance(live: np.ndarray, frozen: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute difference over all elements, gradient w.r.t. ``live``."""
    if live.shape != frozen.shape:
        raise NumericError(f"feature shapes diverged: {live.shape} vs {frozen.shape}")
    d = live - frozen
    return float(np.abs(d).mean()), (np.sign(d) / d.size).astype(live.dtype)
