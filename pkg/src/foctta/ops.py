"""Layer operations with explicit forward/backward rules and saved-set tables.

Every op declares which forward tensors its backward needs, split into

* ``weight_saved`` - required to form the gradient of the op's own parameters;
* ``input_saved``  - required to propagate the gradient to the op's input.

Saved-set tables (``N`` = batch, per-sample shapes in parentheses):

=========  =====================  ==============================  =========================
op         weight_saved           input_saved                     notes
=========  =====================  ==============================  =========================
dense      input (D_in)           -                               W is resident parameter
conv2d     input (C, H, W)        -                               im2col recomputed
batchnorm  normalized (= input)   normalized, inv_std (C, batch)  batch-stats mode
batchnorm  normalized (= input)   inv_std (C, running)            running-stats mode
relu       -                      mask (= input)
maxpool    -                      argmax (= output)               counted at element width
flatten    -                      -                               shape only
=========  =====================  ==============================  =========================

Parameters and BN buffers are model state and are never counted as
retained activations. Ops never modify their inputs in place.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import GraphError

BATCH_STATS = "use-batch-stats"
RUNNING_STATS = "use-running-stats"
BN_MODES = (BATCH_STATS, RUNNING_STATS)


@dataclass
class Parameter:
    id: str
    data: np.ndarray
    layer_id: int
    role: str  # weight | bias | bn-gamma | bn-beta
    trainable: bool = False

    @property
    def nbytes(self) -> int:
        return int(self.data.size * self.data.itemsize)


class Op:
    """Base class. ``layer_id`` is the 1-based position in the graph."""

    kind = "op"
    weight_saved: tuple = ()
    input_saved: tuple = ()

    def __init__(self, layer_id: int):
        self.layer_id = layer_id
        self.params: dict[str, Parameter] = {}

    @property
    def parameterized(self) -> bool:
        return bool(self.params)

    def saved_names(self, bn_mode: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
        return self.weight_saved, self.input_saved

    def out_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def forward(self, x: np.ndarray, bn_mode: str, update_stats: bool) -> tuple[np.ndarray, dict]:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, saved: dict, need_input: bool, need_weight: bool, meta: dict):
        raise NotImplementedError

    def _make_params(self, **arrays: np.ndarray) -> None:
        roles = {"weight": "weight", "bias": "bias", "gamma": "bn-gamma", "beta": "bn-beta"}
        self.params = {
            roles[k]: Parameter(f"{self.layer_id}.{roles[k]}", v, self.layer_id, roles[k])
            for k, v in arrays.items()
        }


class Dense(Op):
    kind = "dense"
    weight_saved = ("input",)

    def __init__(self, layer_id: int, weight: np.ndarray, bias: np.ndarray):
        super().__init__(layer_id)
        if weight.ndim != 2 or bias.shape != (weight.shape[1],):
            raise GraphError(f"dense {layer_id}: weight {weight.shape} / bias {bias.shape} mismatch")
        self._make_params(weight=weight, bias=bias)

    def out_shape(self, shape):
        if len(shape) != 1 or shape[0] != self.params["weight"].data.shape[0]:
            raise GraphError(f"dense {self.layer_id}: input {shape} vs weight {self.params['weight'].data.shape}")
        return (self.params["weight"].data.shape[1],)

    def forward(self, x, bn_mode, update_stats):
        w, b = self.params["weight"].data, self.params["bias"].data
        return x @ w + b, {"input": x}

    def backward(self, dy, saved, need_input, need_weight, meta):
        grads = {}
        if need_weight:
            grads[self.params["weight"].id] = saved["input"].T @ dy
            grads[self.params["bias"].id] = dy.sum(axis=0)
        dx = dy @ self.params["weight"].data.T if need_input else None
        return dx, grads


class Conv2d(Op):
    """Stride-1 'same' convolution with an odd square kernel."""

    kind = "conv2d"
    weight_saved = ("input",)

    def __init__(self, layer_id: int, weight: np.ndarray, bias: np.ndarray):
        super().__init__(layer_id)
        if weight.ndim != 4 or weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise GraphError(f"conv2d {layer_id}: need (F, C, k, k) with odd k, got {weight.shape}")
        if bias.shape != (weight.shape[0],):
            raise GraphError(f"conv2d {layer_id}: bias {bias.shape} for {weight.shape[0]} filters")
        self._make_params(weight=weight, bias=bias)

    @property
    def k(self) -> int:
        return self.params["weight"].data.shape[2]

    def out_shape(self, shape):
        f, c = self.params["weight"].data.shape[:2]
        if len(shape) != 3 or shape[0] != c:
            raise GraphError(f"conv2d {self.layer_id}: input {shape} but kernel expects {c} channels")
        return (f, shape[1], shape[2])

    def forward(self, x, bn_mode, update_stats):
        w, b = self.params["weight"].data, self.params["bias"].data
        n, _, h, wd = x.shape
        k = self.k
        cols = kernels.im2col(x, k, k, k // 2)
        y = cols @ w.reshape(w.shape[0], -1).T + b
        return np.ascontiguousarray(y.transpose(0, 2, 1).reshape(n, w.shape[0], h, wd)), {"input": x}

    def backward(self, dy, saved, need_input, need_weight, meta):
        w = self.params["weight"].data
        f, c, k, _ = w.shape
        n, _, h, wd = dy.shape
        dyr = dy.reshape(n, f, h * wd).transpose(0, 2, 1)
        grads = {}
        if need_weight:
            cols = kernels.im2col(saved["input"], k, k, k // 2)
            dw = dyr.reshape(-1, f).T @ cols.reshape(-1, c * k * k)
            grads[self.params["weight"].id] = dw.reshape(w.shape)
            grads[self.params["bias"].id] = dyr.sum(axis=(0, 1))
        dx = None
        if need_input:
            dcols = dyr @ w.reshape(f, -1)
            dx = kernels.col2im(dcols, c, h, wd, k, k, k // 2)
        return dx, grads


class BatchNorm(Op):
    """Batch normalization over (N, C) or (N, C, H, W) inputs."""

    kind = "batchnorm"

    def __init__(self, layer_id: int, channels: int, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        super().__init__(layer_id)
        self.eps = eps
        self.momentum = momentum
        self._make_params(gamma=np.ones(channels, dtype), beta=np.zeros(channels, dtype))
        self.running_mean = np.zeros(channels, dtype)
        self.running_var = np.ones(channels, dtype)

    @property
    def channels(self) -> int:
        return self.params["bn-gamma"].data.shape[0]

    def saved_names(self, bn_mode):
        if bn_mode == BATCH_STATS:
            return ("normalized",), ("normalized", "inv_std")
        return ("normalized",), ("inv_std",)

    def out_shape(self, shape):
        if len(shape) not in (1, 3) or shape[0] != self.channels:
            raise GraphError(f"batchnorm {self.layer_id}: input {shape} for {self.channels} channels")
        return shape

    def _bcast(self, v: np.ndarray, ndim: int) -> np.ndarray:
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, bn_mode, update_stats):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        if bn_mode == BATCH_STATS:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if update_stats:
                m = x.size // self.channels
                unbiased = var * m / (m - 1) if m > 1 else var
                # rebind, never mutate: earlier tapes may still reference the old buffers
                self.running_mean = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        elif bn_mode == RUNNING_STATS:
            mean, var = self.running_mean, self.running_var
        else:
            raise GraphError(f"unknown BN mode {bn_mode!r}")
        inv_std = (1.0 / np.sqrt(var + self.eps)).astype(x.dtype)
        xhat = (x - self._bcast(mean.astype(x.dtype), x.ndim)) * self._bcast(inv_std, x.ndim)
        y = xhat * self._bcast(self.params["bn-gamma"].data, x.ndim) + self._bcast(
            self.params["bn-beta"].data, x.ndim)
        return y, {"normalized": xhat, "inv_std": inv_std}

    def backward(self, dy, saved, need_input, need_weight, meta):
        axes = (0,) if dy.ndim == 2 else (0, 2, 3)
        grads = {}
        if need_weight:
            grads[self.params["bn-gamma"].id] = (dy * saved["normalized"]).sum(axis=axes)
            grads[self.params["bn-beta"].id] = dy.sum(axis=axes)
        if not need_input:
            return None, grads
        gamma = self._bcast(self.params["bn-gamma"].data, dy.ndim)
        inv_std = self._bcast(saved["inv_std"], dy.ndim)
        dxhat = dy * gamma
        if meta["bn_mode"] == RUNNING_STATS:
            return dxhat * inv_std, grads
        xhat = saved["normalized"]
        m = dy.size // dy.shape[1]
        s1 = self._bcast(dxhat.sum(axis=axes), dy.ndim)
        s2 = self._bcast((dxhat * xhat).sum(axis=axes), dy.ndim)
        dx = inv_std / m * (m * dxhat - s1 - xhat * s2)
        return dx, grads


class ReLU(Op):
    kind = "relu"
    input_saved = ("mask",)

    def __init__(self, layer_id: int):
        super().__init__(layer_id)

    def forward(self, x, bn_mode, update_stats):
        mask = (x > 0).astype(x.dtype)
        return x * mask, {"mask": mask}

    def backward(self, dy, saved, need_input, need_weight, meta):
        return (dy * saved["mask"] if need_input else None), {}


class MaxPool2d(Op):
    """2x2 max pooling, stride 2."""

    kind = "pool"
    input_saved = ("argmax",)

    def __init__(self, layer_id: int):
        super().__init__(layer_id)

    def out_shape(self, shape):
        if len(shape) != 3 or shape[1] < 2 or shape[2] < 2:
            raise GraphError(f"pool {self.layer_id}: cannot pool input {shape}")
        return (shape[0], shape[1] // 2, shape[2] // 2)

    def forward(self, x, bn_mode, update_stats):
        y, idx = kernels.maxpool2x2(x)
        return y, {"argmax": idx}

    def backward(self, dy, saved, need_input, need_weight, meta):
        if not need_input:
            return None, {}
        h, w = meta["in_shape"][2:]
        return kernels.maxpool2x2_backward(dy, saved["argmax"], h, w), {}


class Flatten(Op):
    kind = "flatten"

    def __init__(self, layer_id: int):
        super().__init__(layer_id)

    def out_shape(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, bn_mode, update_stats):
        return x.reshape(x.shape[0], -1), {}

    def backward(self, dy, saved, need_input, need_weight, meta):
        return (dy.reshape(meta["in_shape"]) if need_input else None), {}


OP_KINDS = {cls.kind: cls for cls in (Dense, Conv2d, BatchNorm, ReLU, MaxPool2d, Flatten)}
