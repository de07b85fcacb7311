"""Backend selection for the convolution and pooling kernels.

The compiled extension is used when it imports; set ``FOCTTA_PURE_PYTHON=1``
to force the numpy fallback.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("FOCTTA_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:  # pragma: no cover - depends on build
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"


def _c(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a)


def im2col(x, kh: int, kw: int, pad: int):
    return _impl.im2col(_c(x), kh, kw, pad)


def col2im(cols, c: int, h: int, w: int, kh: int, kw: int, pad: int):
    return _impl.col2im(_c(cols), c, h, w, kh, kw, pad)


def maxpool2x2(x):
    return _impl.maxpool2x2(_c(x))


def maxpool2x2_backward(grad, argmax, h: int, w: int):
    return _impl.maxpool2x2_backward(_c(grad), _c(argmax), h, w)


def backend_module(name: str):
    """Return the kernel module for ``name`` ('python' or 'cython')."""
    if name == "python":
        return _kernels_py
    from . import _kernels  # type: ignore[attr-defined]

    return _kernels
