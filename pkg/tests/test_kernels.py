from __future__ import annotations

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from foctta import kernels
from foctta.kernels import backend_module

py = backend_module("python")
try:
    cy = backend_module("cython")
except ImportError:  # extension not built
    cy = None

needs_cython = pytest.mark.skipif(cy is None, reason="compiled extension not built")

shapes = st.tuples(st.integers(1, 3), st.integers(1, 4), st.integers(1, 7), st.integers(1, 7))


def naive_conv_cols(x, k, pad):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    out = np.zeros((n, ho * wo, c * k * k), x.dtype)
    for i in range(ho):
        for j in range(wo):
            out[:, i * wo + j] = xp[:, :, i:i + k, j:j + k].reshape(n, -1)
    return out


@settings(max_examples=40, deadline=None)
@given(shapes, st.sampled_from([1, 3, 5]))
def test_im2col_matches_naive_loop(shape, k):
    x = np.random.default_rng(sum(shape)).standard_normal(shape)
    np.testing.assert_array_equal(py.im2col(x, k, k, k // 2), naive_conv_cols(x, k, k // 2))


@settings(max_examples=40, deadline=None)
@given(shapes, st.sampled_from([1, 3]))
def test_col2im_is_adjoint_of_im2col(shape, k):
    rng = np.random.default_rng(sum(shape) + k)
    x = rng.standard_normal(shape)
    cols = kernels.im2col(x, k, k, k // 2)
    c = rng.standard_normal(cols.shape)
    lhs = float((cols * c).sum())
    rhs = float((x * kernels.col2im(c, shape[1], shape[2], shape[3], k, k, k // 2)).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_maxpool_picks_window_maximum():
    x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4)
    y, arg = kernels.maxpool2x2(x)
    np.testing.assert_array_equal(y[0, 0], [[5, 7], [13, 15]])
    assert arg.dtype == np.int64
    assert set(np.unique(arg)) == {3}


def test_maxpool_odd_sizes_drop_last_row_and_column():
    x = np.random.default_rng(0).standard_normal((2, 3, 5, 7))
    y, _ = kernels.maxpool2x2(x)
    assert y.shape == (2, 3, 2, 3)
    ref = x[:, :, :4, :6].reshape(2, 3, 2, 2, 3, 2).max(axis=(3, 5))
    np.testing.assert_array_equal(y, ref)


def test_maxpool_backward_routes_to_argmax():
    x = np.random.default_rng(1).standard_normal((2, 2, 4, 6))
    y, arg = kernels.maxpool2x2(x)
    g = np.random.default_rng(2).standard_normal(y.shape)
    dx = kernels.maxpool2x2_backward(g, arg, 4, 6)
    assert dx.shape == x.shape
    np.testing.assert_allclose(dx.sum(), g.sum())
    # every nonzero lands on a window maximum
    mask = dx != 0
    np.testing.assert_array_equal(x[mask], np.repeat(np.repeat(y, 2, 2), 2, 3)[mask])


@needs_cython
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_backends_bit_identical(dtype):
    rng = np.random.default_rng(3)
    for shape in [(1, 1, 1, 1), (2, 3, 5, 4), (4, 16, 8, 8), (3, 2, 7, 9)]:
        x = rng.standard_normal(shape).astype(dtype)
        for k in (1, 3, 5):
            a, b = py.im2col(x, k, k, k // 2), cy.im2col(x, k, k, k // 2)
            assert a.dtype == b.dtype == dtype
            np.testing.assert_array_equal(a, b)
            np.testing.assert_array_equal(py.col2im(a, *shape[1:], k, k, k // 2),
                                          cy.col2im(a, *shape[1:], k, k, k // 2))
        if shape[2] >= 2 and shape[3] >= 2:
            (ya, ia), (yb, ib) = py.maxpool2x2(x), cy.maxpool2x2(x)
            np.testing.assert_array_equal(ya, yb)
            np.testing.assert_array_equal(ia, ib)
            np.testing.assert_array_equal(py.maxpool2x2_backward(ya, ia, *shape[2:]),
                                          cy.maxpool2x2_backward(yb, ib, *shape[2:]))


def test_non_contiguous_inputs_are_accepted():
    x = np.random.default_rng(4).standard_normal((2, 3, 6, 6)).transpose(0, 1, 3, 2)
    np.testing.assert_array_equal(kernels.im2col(x, 3, 3, 1), py.im2col(np.ascontiguousarray(x), 3, 3, 1))


def test_env_var_forces_pure_python():
    env = dict(os.environ, FOCTTA_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from foctta import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_cython
@pytest.mark.skipif(os.environ.get("FOCTTA_PURE_PYTHON", "") in ("1", "true", "yes"),
                    reason="fallback forced by the environment")
def test_default_backend_is_compiled():
    assert kernels.BACKEND == "cython"
