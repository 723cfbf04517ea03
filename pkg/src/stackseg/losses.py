"""Binary cross entropy, soft Jaccard and their joint loss ``H - log(J)``."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, record

BCE_CLIP = 1e-7
JACCARD_EPS = 1e-7


def _check_pair(y: Tensor | np.ndarray, yhat: Tensor) -> np.ndarray:
    y_arr = y.data if isinstance(y, Tensor) else np.asarray(y)
    if y_arr.shape != yhat.shape:
        raise ValueError(f"target shape {y_arr.shape} does not match prediction shape {yhat.shape}")
    return y_arr.astype(yhat.dtype, copy=False)


def bce(y, yhat: Tensor) -> Tensor:
    """Mean binary cross entropy with predictions clipped to [1e-7, 1 - 1e-7].

    The clip has zero gradient where it binds.
    """
    t = _check_pair(y, yhat)
    p = np.clip(yhat.data.astype(np.float64), BCE_CLIP, 1 - BCE_CLIP)
    n = p.size
    h = -(t * np.log(p) + (1 - t) * np.log1p(-p)).sum() / n
    inside = (yhat.data >= BCE_CLIP) & (yhat.data <= 1 - BCE_CLIP)

    def _backward(g):
        d = (p - t) / (p * (1 - p)) / n
        return (float(g) * d * inside).astype(yhat.dtype), None

    y_t = y if isinstance(y, Tensor) else Tensor(t)
    return record("bce", Tensor(np.asarray(h, dtype=yhat.dtype)), (yhat, y_t), _backward)


def soft_jaccard(y, yhat: Tensor, reduction: str = "pooled") -> Tensor:
    """Differentiable Jaccard index of a probability map against a binary target.

    ``pooled`` (default): sum(y*p) / (sum(y + p - y*p) + eps) over the whole
    batch, which equals the pixel-count IoU when ``p`` is binary.
    ``pixel``: the per-pixel ratio y*p / (y + p - y*p + eps) averaged over
    all pixels.
    """
    t = _check_pair(y, yhat).astype(np.float64)
    p = yhat.data.astype(np.float64)
    y_t = y if isinstance(y, Tensor) else Tensor(t.astype(yhat.dtype))
    if reduction == "pooled":
        inter = (t * p).sum()
        union = (t + p - t * p).sum() + JACCARD_EPS
        j = inter / union

        def _backward(g):
            # d inter/dp = t ; d union/dp = 1 - t
            d = (t * union - inter * (1 - t)) / union**2
            return (float(g) * d).astype(yhat.dtype), None

    elif reduction == "pixel":
        n = p.size
        union = t + p - t * p + JACCARD_EPS
        j = (t * p / union).sum() / n

        def _backward(g):
            d = (t * union - t * p * (1 - t)) / union**2 / n
            return (float(g) * d).astype(yhat.dtype), None

    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return record("soft_jaccard", Tensor(np.asarray(j, dtype=yhat.dtype)), (yhat, y_t), _backward)


@dataclass
class LossBreakdown:
    H: Tensor
    J: Tensor
    L: Tensor

    def values(self) -> tuple[float, float, float]:
        return self.H.item(), self.J.item(), self.L.item()


def joint_loss(y, yhat: Tensor, reduction: str = "pooled") -> LossBreakdown:
    """L = H - log(max(J, eps)); gradients flow through both terms."""
    h = bce(y, yhat)
    j = soft_jaccard(y, yhat, reduction)
    loss = ops.sub(h, ops.log(j, floor=JACCARD_EPS))
    return LossBreakdown(h, j, loss)
