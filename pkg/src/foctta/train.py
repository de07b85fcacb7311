"""Supervised pretraining and evaluation of the reference CNN."""
from __future__ import annotations

import logging

import numpy as np

from . import engine, losses
from .data import Dataset, augment_batch, to_nchw
from .engine import Loss
from .nn import ModelSplit
from .ops import BATCH_STATS, RUNNING_STATS
from .optim import Adam

log = logging.getLogger(__name__)


def evaluate(model: ModelSplit, images: np.ndarray, labels: np.ndarray, batch_size: int = 256,
             bn_mode: str = RUNNING_STATS) -> float:
    """Accuracy in [0, 1] on NHWC images."""
    correct = 0
    for i in range(0, len(labels), batch_size):
        logits = model.predict(to_nchw(images[i:i + batch_size]), bn_mode=bn_mode)
        correct += int((logits.argmax(axis=1) == labels[i:i + batch_size]).sum())
    return correct / len(labels)


def pretrain(model: ModelSplit, data: Dataset, epochs: int = 8, lr: float = 2e-3, batch_size: int = 64,
             seed: int = 0, recipe: tuple[str, ...] = (), label_smoothing: float = 0.0) -> list[float]:
    """Train every parameter with cross-entropy; BN uses and tracks batch statistics."""
    trainable = model.set_trainable(op.layer_id for op in model.layers if op.parameterized)
    opt = Adam(model.parameters(), lr=lr)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(data))
        total = 0.0
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            images = data.images[idx]
            if recipe:
                images = augment_batch(images, recipe, int(rng.integers(2**31)))
            out, tape = model.forward(to_nchw(images), trainable=trainable,
                                      bn_mode=BATCH_STATS, update_stats=True)
            value, grad = losses.cross_entropy(out, data.labels[idx], label_smoothing)
            opt.step(engine.backward(tape, Loss(value, {tape.output_id: grad})))
            total += value * len(idx)
        history.append(total / len(order))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    model.set_trainable(())
    return history
