# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled im2col / col2im and 2x2 max-pool kernels.

Loop order matches the numpy fallback in ``_kernels_py`` so both backends
produce bit-identical results.
"""
import numpy as np
cimport numpy as cnp

ctypedef fused floating:
    float
    double


def im2col(const floating[:, :, :, ::1] x, int kh, int kw, int pad):
    """Return columns of shape (N, Ho*Wo, C*kh*kw) for a stride-1 convolution."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, ho * wo, c * kh * kw), dtype=dtype)
    cdef floating[:, :, ::1] cols = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                cols[b, oy * wo + ox, col] = x[b, ch, iy, ix]
    return out


def col2im(const floating[:, :, ::1] cols, Py_ssize_t c, Py_ssize_t h, Py_ssize_t w,
           int kh, int kw, int pad):
    """Adjoint of :func:`im2col`: scatter-add columns back to (N, C, H, W)."""
    cdef Py_ssize_t n = cols.shape[0]
    cdef Py_ssize_t ho = h + 2 * pad - kh + 1, wo = w + 2 * pad - kw + 1
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, ix, col
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(kh):
                    for j in range(kw):
                        col = (ch * kh + i) * kw + j
                        for oy in range(ho):
                            iy = oy + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox + j - pad
                                if ix < 0 or ix >= w:
                                    continue
                                dx[b, ch, iy, ix] = dx[b, ch, iy, ix] + cols[b, oy * wo + ox, col]
    return out


def maxpool2x2(const floating[:, :, :, ::1] x):
    """2x2/stride-2 max pool. Returns (out, argmax) with argmax in 0..3 (row-major window slot)."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[1], h = x.shape[2], w = x.shape[3]
    cdef Py_ssize_t ho = h // 2, wo = w // 2
    dtype = np.float32 if floating is float else np.float64
    out = np.empty((n, c, ho, wo), dtype=dtype)
    idx = np.empty((n, c, ho, wo), dtype=np.int64)
    cdef floating[:, :, :, ::1] o = out
    cdef cnp.int64_t[:, :, :, ::1] a = idx
    cdef Py_ssize_t b, ch, oy, ox, k
    cdef floating best, v
    cdef cnp.int64_t arg
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        best = x[b, ch, 2 * oy, 2 * ox]
                        arg = 0
                        for k in range(1, 4):
                            v = x[b, ch, 2 * oy + k // 2, 2 * ox + k % 2]
                            if v > best:
                                best = v
                                arg = k
                        o[b, ch, oy, ox] = best
                        a[b, ch, oy, ox] = arg
    return out, idx


def maxpool2x2_backward(const floating[:, :, :, ::1] grad, const cnp.int64_t[:, :, :, ::1] argmax,
                        Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t n = grad.shape[0], c = grad.shape[1], ho = grad.shape[2], wo = grad.shape[3]
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((n, c, h, w), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    cdef Py_ssize_t b, ch, oy, ox
    cdef cnp.int64_t k
    with nogil:
        for b in range(n):
            for ch in range(c):
                for oy in range(ho):
                    for ox in range(wo):
                        k = argmax[b, ch, oy, ox]
                        if k < 0 or k > 3:
                            k = 0
                        dx[b, ch, 2 * oy + k // 2, 2 * ox + k % 2] += grad[b, ch, oy, ox]
    return out
