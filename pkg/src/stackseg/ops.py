"""Differentiable operations used by the U-Net and its losses.

Every op computes its forward pass in numpy, checks the result is finite and,
if a tape is recording, registers a closure mapping the output gradient to
input gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Parameter, Tensor, check_finite, record


def _require_4d(x: Tensor, op: str) -> None:
    if x.data.ndim != 4:
        raise ValueError(f"{op} expects an (N, C, H, W) tensor, got shape {x.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, C, H, W) -> (C*9, N*H*W) columns of zero-padded 3x3 neighbourhoods."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # N C H W 3 3
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * 9, n * h * w)


def _conv_same(x: np.ndarray, wmat: np.ndarray, c_out: int) -> tuple[np.ndarray, np.ndarray]:
    n, _, h, w = x.shape
    cols = _im2col(x)
    out = (wmat @ cols).reshape(c_out, n, h, w).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out), cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output keeps H and W)."""
    _require_4d(x, "conv2d")
    if weight.data.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d supports 3x3 kernels only, got weight shape {weight.shape}")
    c_out, c_in = weight.shape[:2]
    if x.shape[1] != c_in:
        raise ValueError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {c_in}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d bias must have shape ({c_out},), got {bias.shape}")

    y, cols = _conv_same(x.data, weight.data.reshape(c_out, c_in * 9), c_out)
    y += bias.data.reshape(1, c_out, 1, 1)
    check_finite(y, "conv2d")
    if not any(t.requires_grad for t in (x, weight, bias)):
        cols = None

    def _backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(c_out, -1)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            # the input gradient is a same-padded convolution of g with the
            # spatially flipped, channel-transposed kernel
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c_in, c_out * 9)
            gx, _ = _conv_same(g, np.ascontiguousarray(wflip), c_in)
        return gx, gw, gb

    return record("conv2d", Tensor(y), (x, weight, bias), _backward)


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    y = np.where(pos, x.data, 0).astype(x.dtype)
    return record("relu", Tensor(y), (x,), lambda g: (g * pos,))


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    # saturated logits round to 0 or 1; keep the range open
    one = np.array(1, dtype=x.dtype)
    s = np.clip(s, np.nextafter(0 * one, one), np.nextafter(one, 0 * one))
    check_finite(s, "sigmoid")
    return record("sigmoid", Tensor(s), (x,), lambda g: (g * s * (1 - s),))


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling; gradient goes to the first maximum in row-major order."""
    _require_4d(x, "maxpool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    y = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def _backward(g):
        onehot = np.zeros((n, c, h // 2, w // 2, 4), dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record("maxpool2x2", Tensor(np.ascontiguousarray(y)), (x,), _backward)


def upsample2x_replicate(x: Tensor) -> Tensor:
    """Copy every element into the 2x2 block it maps to."""
    _require_4d(x, "upsample2x_replicate")
    n, c, h, w = x.shape
    y = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, 2, w, 2)).reshape(n, c, 2 * h, 2 * w)

    def _backward(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record("upsample2x_replicate", Tensor(y), (x,), _backward)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d(a, "concat_channels")
    _require_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    y = np.concatenate([a.data, b.data], axis=1)
    return record("concat_channels", Tensor(y), (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def crop_center(x: Tensor, margin: int) -> Tensor:
    _require_4d(x, "crop_center")
    n, c, h, w = x.shape
    if margin < 0 or 2 * margin >= min(h, w):
        raise ValueError(f"crop margin {margin} too large for {h}x{w}")
    if margin == 0:
        return x
    y = x.data[:, :, margin:h - margin, margin:w - margin].copy()

    def _backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[:, :, margin:h - margin, margin:w - margin] = g
        return (gx,)

    return record("crop_center", Tensor(y), (x,), _backward)


def pad_zeros(x: Tensor, margin: int) -> Tensor:
    """Inverse geometry of :func:`crop_center`: zero border of width ``margin``."""
    _require_4d(x, "pad_zeros")
    if margin == 0:
        return x
    m = margin
    y = np.pad(x.data, ((0, 0), (0, 0), (m, m), (m, m)))
    return record("pad_zeros", Tensor(y), (x,), lambda g: (g[:, :, m:-m, m:-m],))


@dataclass
class BatchNormState:
    """Running per-channel statistics for evaluation mode."""

    channels: int
    momentum: float = 0.99
    running_mean: np.ndarray | None = field(default=None, repr=False)
    running_var: np.ndarray | None = field(default=None, repr=False)

    @property
    def populated(self) -> bool:
        return self.running_mean is not None and self.running_var is not None

    def update(self, mean: np.ndarray, var: np.ndarray) -> None:
        if not self.populated:
            self.running_mean = mean.astype(np.float32)
            self.running_var = var.astype(np.float32)
            return
        mom = self.momentum
        self.running_mean = (mom * self.running_mean + (1 - mom) * mean).astype(np.float32)
        self.running_var = (mom * self.running_var + (1 - mom) * var).astype(np.float32)


BN_EPS = 1e-5


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, mode: str = "train") -> Tensor:
    """Per-channel normalisation over (N, H, W) followed by a scale and shift.

    In ``train`` mode the batch statistics are used and folded into the
    running averages; ``eval`` mode uses the running averages only.
    """
    _require_4d(x, "batchnorm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm affine parameters must have shape ({c},)")
    bshape = (1, c, 1, 1)
    if mode == "train":
        mean = x.data.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.data.var(axis=(0, 2, 3), dtype=np.float64)
        state.update(mean, var)
        mean = mean.astype(x.dtype)
        var = var.astype(x.dtype)
    elif mode == "eval":
        if not state.populated:
            raise RuntimeError("batchnorm eval mode needs populated running statistics")
        mean = state.running_mean.astype(x.dtype)
        var = state.running_var.astype(x.dtype)
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")

    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x.data - mean.reshape(bshape)) * inv_std.reshape(bshape)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    check_finite(y, "batchnorm")

    def _backward(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if mode == "train":
                m = x.shape[0] * x.shape[2] * x.shape[3]
                s1 = gxhat.sum(axis=(0, 2, 3), keepdims=True)
                s2 = (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
                gx = (inv_std.reshape(bshape) / m) * (m * gxhat - s1 - xhat * s2)
            else:
                gx = gxhat * inv_std.reshape(bshape)
        return gx, gg, gb

    return record("batchnorm", Tensor(y), (x, gamma, beta), _backward)


# Scalar and elementwise helpers used by the losses and the tests.


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record("add", Tensor(a.data + b.data), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return record("sub", Tensor(a.data - b.data), (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return record("mul", Tensor(a.data * b.data), (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x: Tensor) -> Tensor:
    y = np.asarray(x.data.sum(dtype=np.float64), dtype=x.dtype)
    return record("sum", Tensor(y), (x,), lambda g: (np.full(x.shape, g, dtype=x.dtype),))


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    y = np.asarray(x.data.mean(dtype=np.float64), dtype=x.dtype)
    return record("mean", Tensor(y), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.dtype),))


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log of ``max(x, floor)``; zero gradient where the floor binds."""
    clipped = np.maximum(x.data, floor) if floor > 0 else x.data
    y = check_finite(np.log(clipped), "log")
    live = x.data > floor if floor > 0 else True
    return record("log", Tensor(y), (x,), lambda g: (g * live / clipped,))


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """sum(x * weights) with a constant weight array; handy as a probe loss."""
    if weights.shape != x.shape:
        raise ValueError("weights must match the tensor shape")
    w = weights.astype(x.dtype)
    y = np.asarray((x.data * w).sum(dtype=np.float64), dtype=x.dtype)
    return record("weighted_sum", Tensor(y), (x,), lambda g: (g * w,))
