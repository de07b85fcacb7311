from __future__ import annotations

import itertools

import numpy as np
import pytest

from foctta import engine
from foctta.engine import Loss
from foctta.nn import CNNConfig, build_reference_cnn
from foctta.ops import BATCH_STATS, BN_MODES, BatchNorm, Dense, ReLU

from oracles import required_saved

D = 3
BATCH = 2
LAYER_KINDS = ("dense", "bn", "relu")


def build(kinds, rng):
    graph = []
    for i, k in enumerate(kinds, start=1):
        if k == "dense":
            graph.append(Dense(i, rng.standard_normal((D, D)), rng.standard_normal(D)))
        elif k == "bn":
            op = BatchNorm(i, D)
            op.running_var = rng.uniform(0.5, 2.0, D)
            graph.append(op)
        else:
            graph.append(ReLU(i))
    return graph


def all_graphs(max_len):
    for n in range(1, max_len + 1):
        yield from itertools.product(LAYER_KINDS, repeat=n)


def masks_for(graph):
    """Every subset of parameterized layers, as (per-layer bool mask, trainable id set)."""
    pidx = [i for i, op in enumerate(graph) if op.parameterized]
    for bits in itertools.product((False, True), repeat=len(pidx)):
        mask = [False] * len(graph)
        for i, b in zip(pidx, bits):
            mask[i] = b
        ids = {p.id for i, op in enumerate(graph) if mask[i] for p in op.params.values()}
        yield mask, ids


def oracle(graph, mask, bn_mode):
    table = [(op.parameterized,) + op.saved_names(bn_mode) for op in graph]
    return required_saved(table, mask)


def check_graph(kinds, rng):
    graph = build(kinds, rng)
    x = rng.standard_normal((BATCH, D))
    width = x.dtype.itemsize
    for mask, ids in masks_for(graph):
        for bn_mode in BN_MODES:
            got = engine.analyze_retention(graph, ids, bn_mode)
            want = oracle(graph, mask, bn_mode)
            assert [set(got[op.layer_id].names) for op in graph] == want, (kinds, mask, bn_mode)
            _, tape = engine.forward(graph, x, trainable=ids, bn_mode=bn_mode)
            measured = sum(n.weight_grad_bytes for n in tape.nodes)
            # every trainable layer here keeps exactly one input-sized tensor for its weight grad
            assert measured == sum(D * BATCH * width for m in mask if m)
            assert [set(n.saved) for n in tape.nodes] == want


def test_retention_matches_dependency_walk_on_all_small_graphs():
    rng = np.random.default_rng(0)
    for kinds in all_graphs(6):
        check_graph(kinds, rng)


@pytest.mark.parametrize("bn_mode", BN_MODES)
def test_retention_is_minimal_and_sufficient(bn_mode):
    """Dropping any retained tensor breaks backward; keeping everything changes nothing."""
    rng = np.random.default_rng(1)
    for kinds in all_graphs(4):
        graph = build(kinds, rng)
        x = rng.standard_normal((BATCH + 1, D))
        for mask, ids in masks_for(graph):
            if not ids:
                continue
            out, tape = engine.forward(graph, x, trainable=ids, bn_mode=bn_mode)
            seed = Loss(0.0, {tape.output_id: rng.standard_normal(out.shape)})
            grads = engine.backward(tape, seed)
            _, full = engine.forward(graph, x, trainable=ids, bn_mode=bn_mode, retain_all=True)
            full_grads = engine.backward(full, seed)
            for k in grads:
                np.testing.assert_array_equal(grads[k], full_grads[k])
            for i, node in enumerate(tape.nodes):
                for name in node.saved:
                    pruned = dict(node.saved)
                    del pruned[name]
                    nodes = list(tape.nodes)
                    nodes[i] = engine.TapeNode(**{**node.__dict__, "saved": pruned})
                    broken = engine.Tape(nodes, tape.output, tape.taps, tape.trainable, tape.bn_mode,
                                         tape.batch, tape.graph)
                    with pytest.raises(KeyError):
                        engine.backward(broken, seed)


def test_frozen_graph_retains_nothing():
    rng = np.random.default_rng(2)
    graph = build(("dense", "bn", "relu", "dense"), rng)
    _, tape = engine.forward(graph, rng.standard_normal((4, D)), trainable=())
    assert tape.retained_bytes == 0


def test_reference_cnn_retention_all_masks():
    model = build_reference_cnn(CNNConfig(num_classes=3, seed=0))
    graph = model.layers
    for bn_mode in BN_MODES:
        for mask, ids in masks_for(graph):
            got = engine.analyze_retention(graph, ids, bn_mode)
            assert [set(got[op.layer_id].names) for op in graph] == oracle(graph, mask, bn_mode)


def test_reference_cnn_measured_bytes_on_sampled_masks():
    model = build_reference_cnn(CNNConfig(num_classes=3, seed=0, dtype="float32"))
    graph = model.layers
    shapes = engine.infer_shapes(graph, model.input_shape)
    rng = np.random.default_rng(3)
    masks = list(masks_for(graph))
    x = rng.standard_normal((4,) + model.input_shape).astype(np.float32)
    for j in rng.choice(len(masks), size=24, replace=False):
        mask, ids = masks[j]
        _, tape = engine.forward(graph, x, trainable=ids, bn_mode=BATCH_STATS)
        expect = sum(int(np.prod(shapes[i])) * 4 * 4 for i, m in enumerate(mask) if m)
        assert sum(n.weight_grad_bytes for n in tape.nodes) == expect
