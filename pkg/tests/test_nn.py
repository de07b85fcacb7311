from __future__ import annotations

import struct

import numpy as np
import pytest

from foctta.errors import ConfigError, GraphError, PlanError
from foctta.nn import (MAGIC, CNNConfig, ModelSplit, build_reference_cnn, load_checkpoint, read_checkpoint,
                       save_checkpoint, snapshot_frozen_reference)
from foctta.ops import BATCH_STATS, RUNNING_STATS, Conv2d, Dense, Flatten


def test_reference_cnn_layout():
    m = build_reference_cnn(CNNConfig(num_classes=3))
    kinds = [op.kind for op in m.layers]
    assert kinds == ["conv2d", "batchnorm", "relu", "pool"] * 3 + ["flatten", "dense"]
    assert m.representation_ids == [1, 5, 9]
    assert m.bn_ids == [2, 6, 10]
    assert m.classifier_ids == [14]
    assert m.L == 7
    assert m.num_classes == 3
    assert len(m.g_s) + len(m.h_s) == len(m.layers)


@pytest.mark.parametrize("classes,count", [(3, 24291), (10, 26090)])
def test_parameter_count_in_target_range(classes, count):
    m = build_reference_cnn(CNNConfig(num_classes=classes))
    assert m.param_count() == count
    assert 20_000 <= count <= 40_000


def test_descriptor_tags_are_exclusive():
    m = build_reference_cnn(CNNConfig(classifier_hidden=(8,)))
    for d in m.descriptors():
        assert not (d.is_representation and d.is_classifier)
    assert m.classifier_ids == [14, 16]


def test_initialization_is_deterministic_and_he_scaled():
    a = build_reference_cnn(CNNConfig(seed=4))
    b = build_reference_cnn(CNNConfig(seed=4))
    c = build_reference_cnn(CNNConfig(seed=5))
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    assert not np.array_equal(a.param("1.weight").data, c.param("1.weight").data)
    w = build_reference_cnn(CNNConfig(widths=(16, 32, 256), seed=0)).param("9.weight").data
    assert w.std() == pytest.approx(np.sqrt(2 / (32 * 9)), rel=0.05)


@pytest.mark.parametrize("bad", [dict(num_classes=1), dict(kernel=2), dict(widths=()),
                                 dict(input_size=4, widths=(2, 2, 2, 2, 2)), dict(dtype="int8")])
def test_config_validation(bad):
    with pytest.raises(ConfigError):
        build_reference_cnn(CNNConfig(**bad))


def test_classifier_must_be_dense_stack():
    rng = np.random.default_rng(0)
    layers = [Conv2d(1, rng.standard_normal((2, 1, 3, 3)), np.zeros(2)), Flatten(2)]
    with pytest.raises(GraphError):
        ModelSplit(layers, 1, (1, 4, 4))
    ok = ModelSplit(layers + [Dense(3, rng.standard_normal((32, 2)), np.zeros(2))], 2, (1, 4, 4))
    assert ok.representation_ids == [1]


def test_set_trainable_is_exact_and_checks_ids():
    m = build_reference_cnn()
    ids = m.set_trainable([5, 6])
    assert ids == {"5.weight", "5.bias", "6.bn-gamma", "6.bn-beta"}
    with pytest.raises(PlanError):
        m.set_trainable([99])


def perturb(model, seed=0):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = (p.data + rng.standard_normal(p.data.shape)).astype(p.data.dtype)
    for op in model.layers:
        if op.kind == "batchnorm":
            op.running_mean = rng.standard_normal(op.channels).astype(op.running_mean.dtype)
            op.running_var = rng.uniform(0.5, 2, op.channels).astype(op.running_var.dtype)


@pytest.mark.parametrize("dtype", ["float32", "float64"])
def test_checkpoint_round_trip_is_bit_exact(tmp_path, dtype):
    m = build_reference_cnn(CNNConfig(num_classes=4, dtype=dtype, seed=2))
    perturb(m)
    meta = {"clean_accuracy": 0.97, "seed": 2, "lineage": ["a", "b"]}
    save_checkpoint(m, tmp_path / "m.ckpt", meta)
    m2, meta2 = load_checkpoint(tmp_path / "m.ckpt")
    assert meta2 == meta
    for k, v in m.state().items():
        w = m2.state()[k]
        assert w.dtype == v.dtype
        np.testing.assert_array_equal(w, v)
    save_checkpoint(m2, tmp_path / "m2.ckpt", meta)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()


def test_checkpoint_header_layout(tmp_path):
    m = build_reference_cnn()
    save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:8] == MAGIC
    version, hlen = struct.unpack("<IQ", raw[8:20])
    assert version == 1
    header, arrays = read_checkpoint(tmp_path / "m.ckpt")
    assert len(raw) == 20 + hlen + sum(e["nbytes"] for e in header["arrays"])
    assert "buffer/2.running_var" in arrays
    assert [l["tag"] for l in header["layers"]][:2] == ["representation", "bn"]


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"NOTACKPT" + bytes(20))
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_frozen_snapshot_is_immutable_and_detached():
    m = build_reference_cnn(CNNConfig(num_classes=3, dtype="float32"))
    frozen = snapshot_frozen_reference(m)
    before = {k: v.copy() for k, v in frozen.model.state().items()}
    with pytest.raises(ValueError):
        frozen.model.param("1.weight").data[0, 0, 0, 0] = 1.0
    perturb(m)
    x = np.random.default_rng(0).standard_normal((4, 1, 16, 16)).astype(np.float32)
    frozen(x, bn_mode=BATCH_STATS)
    for k, v in frozen.model.state().items():
        np.testing.assert_array_equal(v, before[k])
    assert all(not p.trainable for p in frozen.model.parameters())


def test_frozen_forward_exposes_taps():
    m = build_reference_cnn(CNNConfig(num_classes=3))
    x = np.random.default_rng(1).standard_normal((2, 1, 16, 16))
    out, taps = snapshot_frozen_reference(m).forward(x, bn_mode=RUNNING_STATS, taps=[5])
    assert taps[5].shape == (2, 32, 8, 8)
    np.testing.assert_array_equal(out, m.predict(x, bn_mode=RUNNING_STATS))


def test_clone_is_independent():
    m = build_reference_cnn()
    c = m.clone()
    perturb(c)
    assert not np.array_equal(c.param("1.weight").data, m.param("1.weight").data)
