"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``.

Accumulation order follows the compiled loops, so results are bit-identical.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x: np.ndarray, kh: int, kw: int, pad: int) -> np.ndarray:
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, Ho, Wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n, ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, c: int, h: int, w: int, kh: int, kw: int, pad: int) -> np.ndarray:
    n = cols.shape[0]
    ho, wo = h + 2 * pad - kh + 1, w + 2 * pad - kw + 1
    blocks = cols.reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + ho, j:j + wo] += blocks[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if pad:
        dx = dx[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(dx)


def maxpool2x2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    win = x[:, :, :2 * ho, :2 * wo].reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, ho, wo, 4)
    idx = win.argmax(axis=-1).astype(np.int64)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool2x2_backward(grad: np.ndarray, argmax: np.ndarray, h: int, w: int) -> np.ndarray:
    n, c, ho, wo = grad.shape
    k = np.where((argmax < 0) | (argmax > 3), 0, argmax)
    hit = k[..., None] == np.arange(4)
    spread = np.where(hit, grad[..., None], np.zeros((), dtype=grad.dtype))
    spread = spread.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
    dx = np.zeros((n, c, h, w), dtype=grad.dtype)
    dx[:, :, :2 * ho, :2 * wo] = spread
    return dx
