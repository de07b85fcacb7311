"""Sequential reverse-mode autodiff with selective activation retention.

A graph is a static list of :class:`~foctta.ops.Op`. :func:`forward` runs it
and keeps, per node, only the tensors that :func:`analyze_retention` says the
backward pass will need for the current trainable set. Tensor ids on a tape
are positions: id 0 is the graph input and id ``i`` is the output of node
``i`` (1-based).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import GraphError, NumericError, UsageError
from .ops import BATCH_STATS, BN_MODES, Op

DEBUG = False


def set_debug(enabled: bool) -> None:
    """Toggle non-finite checks on every forward output and gradient."""
    global DEBUG
    DEBUG = enabled


@dataclass(frozen=True)
class SavedSet:
    weight: tuple[str, ...] = ()
    input: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return self.weight + tuple(n for n in self.input if n not in self.weight)

    def __bool__(self) -> bool:
        return bool(self.weight or self.input)


@dataclass(frozen=True)
class TapeNode:
    op_kind: str
    layer_id: int
    input_id: int
    output_id: int
    saved_set: SavedSet
    saved: Mapping[str, np.ndarray]
    in_shape: tuple[int, ...]
    need_weight: bool
    need_input: bool
    width: int

    def _bytes(self, names: Iterable[str]) -> int:
        return sum(int(self.saved[n].size) for n in names if n in self.saved) * self.width

    @property
    def retained_bytes(self) -> int:
        return self._bytes(self.saved)

    @property
    def weight_grad_bytes(self) -> int:
        return self._bytes(self.saved_set.weight)

    @property
    def passthrough_bytes(self) -> int:
        return self._bytes(n for n in self.saved_set.input if n not in self.saved_set.weight)


@dataclass
class Tape:
    nodes: list[TapeNode]
    output: np.ndarray
    taps: dict[int, np.ndarray]
    trainable: frozenset[str]
    bn_mode: str
    batch: int
    graph: Sequence[Op] = field(repr=False, default=())

    @property
    def output_id(self) -> int:
        return len(self.nodes)

    @property
    def retained_bytes(self) -> int:
        return sum(n.retained_bytes for n in self.nodes)


@dataclass
class Loss:
    """Scalar loss value plus the gradient it seeds at tape tensors.

    Losses combine linearly: ``ent + lam * reg`` adds values and seeds.
    """

    value: float
    seeds: dict[int, np.ndarray] = field(default_factory=dict)

    def __add__(self, other: "Loss") -> "Loss":
        seeds = dict(self.seeds)
        for k, g in other.seeds.items():
            seeds[k] = seeds[k] + g if k in seeds else g
        return Loss(self.value + other.value, seeds)

    def __mul__(self, c: float) -> "Loss":
        return Loss(self.value * c, {k: g * c for k, g in self.seeds.items()})

    __rmul__ = __mul__


def graph_params(graph: Sequence[Op]):
    for op in graph:
        yield from op.params.values()


def trainable_ids(graph: Sequence[Op]) -> frozenset[str]:
    return frozenset(p.id for p in graph_params(graph) if p.trainable)


def infer_shapes(graph: Sequence[Op], in_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-sample input shape of every node, plus the final output shape."""
    shapes = [tuple(in_shape)]
    for op in graph:
        shapes.append(tuple(op.out_shape(shapes[-1])))
    return shapes


def analyze_retention(graph: Sequence[Op], trainable: Iterable[str] | None = None,
                      bn_mode: str = BATCH_STATS) -> dict[int, SavedSet]:
    """Minimal saved-set per node (keyed by layer id) for the trainable set.

    Weight-grad tensors are kept iff the node's own parameters are trainable;
    input-grad tensors iff a trainable parameter lies strictly upstream.
    """
    train = trainable_ids(graph) if trainable is None else frozenset(trainable)
    out: dict[int, SavedSet] = {}
    upstream = False
    for op in graph:
        wnames, inames = op.saved_names(bn_mode)
        own = any(p.id in train for p in op.params.values())
        out[op.layer_id] = SavedSet(wnames if own else (), inames if upstream else ())
        upstream = upstream or own
    return out


def _check(name: str, a: np.ndarray) -> None:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {name}")


def forward(graph: Sequence[Op], x: np.ndarray, trainable: Iterable[str] | None = None, *,
            bn_mode: str = BATCH_STATS, update_stats: bool = False, taps: Iterable[int] = (),
            retain_all: bool = False) -> tuple[np.ndarray, Tape]:
    """Run the graph on a batch and record a tape.

    ``trainable`` defaults to the parameters' own flags. ``taps`` lists layer
    ids whose outputs are exposed on the tape (for feature-level losses).
    ``retain_all`` keeps every tensor any backward rule could use; it exists
    for testing retention minimality and does not change ``need_*`` flags.
    """
    if bn_mode not in BN_MODES:
        raise GraphError(f"unknown BN mode {bn_mode!r}")
    if x.ndim < 2 or x.shape[0] < 1:
        raise GraphError(f"input must be a non-empty batch, got shape {x.shape}")
    train = trainable_ids(graph) if trainable is None else frozenset(trainable)
    known = {p.id for p in graph_params(graph)}
    if not train <= known:
        raise GraphError(f"unknown parameter ids {sorted(train - known)}")
    plan = analyze_retention(graph, train, bn_mode)
    taps = set(taps)
    width = x.dtype.itemsize
    nodes: list[TapeNode] = []
    tapped: dict[int, np.ndarray] = {}
    upstream = False
    for i, op in enumerate(graph, start=1):
        op.out_shape(x.shape[1:])
        y, cand = op.forward(x, bn_mode, update_stats)
        if DEBUG:
            _check(f"output of layer {op.layer_id} ({op.kind})", y)
        own = any(p.id in train for p in op.params.values())
        sset = plan[op.layer_id]
        keep = sset.names
        if retain_all:
            w, inp = op.saved_names(bn_mode)
            keep = w + tuple(n for n in inp if n not in w)
        nodes.append(TapeNode(op.kind, op.layer_id, i - 1, i, sset, {n: cand[n] for n in keep},
                              tuple(x.shape), own, upstream, width))
        upstream = upstream or own
        if op.layer_id in taps:
            tapped[op.layer_id] = y
        x = y
    return x, Tape(nodes, x, tapped, train, bn_mode, int(x.shape[0]), graph)


def backward(tape: Tape | None, loss: Loss) -> dict[str, np.ndarray]:
    """Gradients for exactly the tape's trainable parameters."""
    if tape is None:
        raise UsageError("backward called without a forward tape")
    if not isinstance(loss, Loss):
        raise UsageError("loss must be a scalar Loss")
    graph = tape.graph
    grads: dict[str, np.ndarray] = {}
    g = None
    for node in reversed(tape.nodes):
        seed = loss.seeds.get(node.output_id)
        if seed is not None:
            g = seed if g is None else g + seed
        if g is None or not (node.need_weight or node.need_input):
            g = None
            continue
        op = graph[node.output_id - 1]
        meta = {"bn_mode": tape.bn_mode, "in_shape": node.in_shape}
        dx, pg = op.backward(g, node.saved, node.need_input, node.need_weight, meta)
        grads.update(pg)
        g = dx
    for p in graph_params(graph):
        if p.id in tape.trainable:
            if p.id not in grads:
                grads[p.id] = np.zeros_like(p.data)
            if DEBUG:
                _check(f"gradient of {p.id}", grads[p.id])
    return {k: v for k, v in grads.items() if k in tape.trainable}
