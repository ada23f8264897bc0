"""Layer kinds with explicit forward/backward passes.

Activations are batched: conv-type layers see ``(N, C, H, W)``, fully
connected ones ``(N, D)`` (a conv volume is flattened on entry).  Every
forward returns ``(y, cache)`` and every backward takes that cache back and
returns ``(dx, param_grads)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError

KINDS = (
    "conv",
    "maxpool",
    "relu",
    "lrn",
    "fully_connected",
    "dropout",
    "l2norm",
    "concat_inject",
)

L2_EPS = 1e-12


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    name: str
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    window: int = 0
    lrn_k: float = 2.0
    lrn_n: int = 5
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    rate: float = 0.0
    width: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0):
            raise ValueError(f"{self.name}: conv needs positive channels/kernel/stride")
        if self.kind == "maxpool" and (self.window < 1 or self.stride < 1):
            raise ValueError(f"{self.name}: maxpool needs positive window/stride")
        if self.kind == "lrn" and (self.lrn_n < 1 or self.lrn_k <= 0 or self.lrn_alpha < 0 or self.lrn_beta < 0):
            raise ValueError(f"{self.name}: bad LRN constants")
        if self.kind == "fully_connected" and self.width < 1:
            raise ValueError(f"{self.name}: fully_connected needs width >= 1")
        if self.kind == "dropout" and not 0.0 <= self.rate < 1.0:
            raise ValueError(f"{self.name}: dropout rate must be in [0, 1)")
        if self.kind == "concat_inject" and self.width < 0:
            raise ValueError(f"{self.name}: injected width must be >= 0")

    def to_dict(self) -> dict:
        defaults = LayerSpec.__dataclass_fields__
        out = {"kind": self.kind, "name": self.name}
        for key, f in defaults.items():
            if key in out:
                continue
            value = getattr(self, key)
            if value != f.default:
                out[key] = value
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


# -- shape inference -------------------------------------------------------


def output_shape(spec: LayerSpec, in_shape: tuple) -> tuple:
    """Per-sample output shape, or DimensionError with a plain message."""
    k = spec.kind
    if k == "conv":
        if len(in_shape) != 3:
            raise DimensionError(f"expected (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        ho = (h + 2 * spec.pad - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.pad - spec.kernel) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"kernel {spec.kernel} too large for input {in_shape}")
        return (spec.out_channels, ho, wo)
    if k == "maxpool":
        if len(in_shape) != 3:
            raise DimensionError(f"expected (C, H, W) input, got {in_shape}")
        c, h, w = in_shape
        ho = (h - spec.window) // spec.stride + 1
        wo = (w - spec.window) // spec.stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"pool window {spec.window} too large for input {in_shape}")
        return (c, ho, wo)
    if k == "lrn":
        if len(in_shape) != 3:
            raise DimensionError(f"expected (C, H, W) input, got {in_shape}")
        return in_shape
    if k in ("relu", "dropout"):
        return in_shape
    if k == "fully_connected":
        return (spec.width,)
    if k == "l2norm":
        return (int(np.prod(in_shape)),)
    if k == "concat_inject":
        if len(in_shape) != 1:
            raise DimensionError(f"expected flat input, got {in_shape}")
        return (in_shape[0] + spec.width,)
    raise AssertionError(k)


def param_shapes(spec: LayerSpec, in_shape: tuple) -> dict[str, tuple]:
    if spec.kind == "conv":
        return {"W": (spec.out_channels, in_shape[0], spec.kernel, spec.kernel), "b": (spec.out_channels,)}
    if spec.kind == "fully_connected":
        return {"W": (int(np.prod(in_shape)), spec.width), "b": (spec.width,)}
    return {}


def fan_in(spec: LayerSpec, in_shape: tuple) -> int:
    if spec.kind == "conv":
        return in_shape[0] * spec.kernel * spec.kernel
    return int(np.prod(in_shape))


# -- conv ------------------------------------------------------------------


def _im2col(xp: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    # xp: padded (N, C, H, W) -> (N, Ho, Wo, C*k*k)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * kernel * kernel)


def conv_forward(spec, p, x):
    W, b = p["W"], p["b"]
    f = W.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (spec.pad, spec.pad), (spec.pad, spec.pad))) if spec.pad else x
    cols = _im2col(xp, spec.kernel, spec.stride)
    y = cols @ W.reshape(f, -1).T + b
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)), (x.shape, cols)


def conv_backward(spec, p, cache, dy):
    x_shape, cols = cache
    W = p["W"]
    f, c, k, _ = W.shape
    n, ho, wo = dy.shape[0], dy.shape[2], dy.shape[3]
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dW = (dy2.T @ cols.reshape(-1, c * k * k)).reshape(W.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ W.reshape(f, -1)).reshape(n, ho, wo, c, k, k)
    s, pad = spec.stride, spec.pad
    hp, wp = x_shape[2] + 2 * pad, x_shape[3] + 2 * pad
    dxp = np.zeros((n, c, hp, wp), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, pad : hp - pad, pad : wp - pad] if pad else dxp
    return dx, {"W": dW, "b": db}


# -- max pooling -----------------------------------------------------------


def maxpool_forward(spec, x):
    win = sliding_window_view(x, (spec.window, spec.window), axis=(2, 3))[:, :, :: spec.stride, :: spec.stride]
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, -1)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def maxpool_backward(spec, cache, dy):
    x_shape, arg = cache
    k, s = spec.window, spec.stride
    ho, wo = arg.shape[2], arg.shape[3]
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            sel = np.where(arg == i * k + j, dy, 0.0)
            dx[:, :, i : i + s * ho : s, j : j + s * wo : s] += sel
    return dx


# -- local response normalization (cross-channel) --------------------------


def _channel_window_sum(sq: np.ndarray, n: int) -> np.ndarray:
    half = n // 2
    c = sq.shape[1]
    cs = np.cumsum(np.pad(sq, ((0, 0), (1, 0), (0, 0), (0, 0))), axis=1)
    lo = np.clip(np.arange(c) - half, 0, c)
    hi = np.clip(np.arange(c) + (n - 1 - half) + 1, 0, c)
    return cs[:, hi] - cs[:, lo]


def lrn_forward(spec, x):
    """b_c = a_c / (k + alpha * sum_{c' near c} a_{c'}^2) ** beta."""
    s = spec.lrn_k + spec.lrn_alpha * _channel_window_sum(x * x, spec.lrn_n)
    scale = s ** (-spec.lrn_beta)
    y = x * scale
    return y, (x, s, scale)


def lrn_backward(spec, cache, dy):
    x, s, scale = cache
    # window is symmetric for odd n; for even n use the mirrored window
    t = dy * x * scale / s
    n = spec.lrn_n
    if n % 2 == 1:
        acc = _channel_window_sum(t, n)
    else:
        acc = _channel_window_sum(t[:, ::-1], n)[:, ::-1]
    return dy * scale - 2.0 * spec.lrn_alpha * spec.lrn_beta * x * acc


# -- flat layers -----------------------------------------------------------


def fc_forward(p, x):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ p["W"] + p["b"], (x.shape, x2)


def fc_backward(p, cache, dy):
    x_shape, x2 = cache
    dW = x2.T @ dy
    db = dy.sum(axis=0)
    dx = (dy @ p["W"].T).reshape(x_shape)
    return dx, {"W": dW, "b": db}


def dropout_forward(spec, x, train, rng):
    if not train or spec.rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError(f"{spec.name}: train-mode dropout needs an rng")
    keep = 1.0 - spec.rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return x * mask, mask


def l2norm_forward(x):
    x2 = x.reshape(x.shape[0], -1)
    norms = np.linalg.norm(x2, axis=1, keepdims=True)
    denom = np.maximum(norms, L2_EPS)
    y = x2 / denom
    return y, (x.shape, y, norms, denom)


def l2norm_backward(cache, dy):
    x_shape, y, norms, denom = cache
    live = norms > L2_EPS
    proj = dy - y * np.sum(y * dy, axis=1, keepdims=True)
    dx = np.where(live, proj, dy) / denom
    return dx.reshape(x_shape)


# -- dispatch --------------------------------------------------------------


def layer_forward(spec: LayerSpec, p: dict, x: np.ndarray, train: bool, rng, inject=None):
    k = spec.kind
    if k == "conv":
        return conv_forward(spec, p, x)
    if k == "maxpool":
        return maxpool_forward(spec, x)
    if k == "relu":
        mask = x > 0
        return x * mask, mask
    if k == "lrn":
        return lrn_forward(spec, x)
    if k == "fully_connected":
        return fc_forward(p, x)
    if k == "dropout":
        return dropout_forward(spec, x, train, rng)
    if k == "l2norm":
        return l2norm_forward(x)
    if k == "concat_inject":
        if spec.width == 0:
            return x, None
        if inject is None or inject.shape != (x.shape[0], spec.width):
            got = None if inject is None else tuple(inject.shape)
            raise DimensionError(f"{spec.name}: expected injected block {(x.shape[0], spec.width)}, got {got}")
        return np.concatenate([x, inject.astype(x.dtype, copy=False)], axis=1), x.shape[1]
    raise AssertionError(k)


def layer_backward(spec: LayerSpec, p: dict, cache, dy: np.ndarray):
    k = spec.kind
    if k == "conv":
        return conv_backward(spec, p, cache, dy)
    if k == "maxpool":
        return maxpool_backward(spec, cache, dy), {}
    if k == "relu":
        return dy * cache, {}
    if k == "lrn":
        return lrn_backward(spec, cache, dy), {}
    if k == "fully_connected":
        return fc_backward(p, cache, dy)
    if k == "dropout":
        return (dy if cache is None else dy * cache), {}
    if k == "l2norm":
        return l2norm_backward(cache, dy), {}
    if k == "concat_inject":
        # injected scores are constants: their gradient is dropped here
        return (dy if cache is None else dy[:, :cache]), {}
    raise AssertionError(k)
