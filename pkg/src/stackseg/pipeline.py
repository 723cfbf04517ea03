"""Large-raster inference: mirror padding, tiling, dihedral TTA, reassembly,
thresholding and resolution scaling.

Rasters are numpy arrays with the spatial axes first: ``(H, W)`` for masks
and score maps, ``(H, W, C)`` for images. Patch batches handed to a model are
``(N, C, P, P)``; the dihedral transforms act on the last two axes so they
apply to patch batches and single 2-D maps alike.
"""

from __future__ import annotations

import enum
import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Iterator

import numpy as np

from .metrics import confusion_counts
from .tensor import Tensor, no_record

Predictor = Callable[[np.ndarray], np.ndarray]


def mirror_pad(image: np.ndarray, margin: int) -> np.ndarray:
    """Reflect ``margin`` pixels across every border, edge pixel not repeated."""
    h, w = image.shape[:2]
    if margin < 0 or margin >= min(h, w):
        raise ValueError(f"margin {margin} must be smaller than the image ({h}x{w})")
    pad = [(margin, margin), (margin, margin)] + [(0, 0)] * (image.ndim - 2)
    return np.pad(image, pad, mode="reflect")


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    patch_size: int
    margin: int
    row_origins: tuple[int, ...]
    col_origins: tuple[int, ...]

    @property
    def stride(self) -> int:
        return self.patch_size - 2 * self.margin

    @property
    def origins(self) -> list[tuple[int, int]]:
        """Row-major list of output-window origins in image coordinates.

        The matching patch starts at the same coordinates in the raster
        mirror-padded by ``margin``.
        """
        return [(r, c) for r in self.row_origins for c in self.col_origins]

    def __len__(self) -> int:
        return len(self.row_origins) * len(self.col_origins)


def _axis_origins(size: int, stride: int) -> tuple[int, ...]:
    n = -(-size // stride)
    return tuple(min(i * stride, size - stride) for i in range(n))


def plan_grid(shape: tuple[int, int], patch_size: int, margin: int) -> TileGrid:
    """Origins at ``patch_size - 2*margin`` spacing; the last row and column are
    pulled back so their windows end flush with the image edge."""
    h, w = shape[:2]
    stride = patch_size - 2 * margin
    if margin < 0 or stride < 1:
        raise ValueError(f"patch_size {patch_size} must exceed 2*margin ({2 * margin})")
    if h < stride or w < stride:
        raise ValueError(f"image {h}x{w} is smaller than one output window ({stride})")
    return TileGrid(h, w, patch_size, margin, _axis_origins(h, stride), _axis_origins(w, stride))


def extract_patches(padded: np.ndarray, grid: TileGrid, batch_size: int = 16) -> Iterator[np.ndarray]:
    """Yield (B, C, P, P) float32 batches in grid order."""
    p = grid.patch_size
    batch = []
    for r, c in grid.origins:
        patch = padded[r:r + p, c:c + p]
        batch.append(patch[None] if patch.ndim == 2 else np.moveaxis(patch, -1, 0))
        if len(batch) == batch_size:
            yield np.stack(batch).astype(np.float32)
            batch = []
    if batch:
        yield np.stack(batch).astype(np.float32)


def assemble(outputs, grid: TileGrid) -> np.ndarray:
    """Write cropped outputs into a full-size map in row-major grid order.

    Windows of the clamped last row/column overlap their predecessors; the
    later write wins.
    """
    outputs = list(outputs)
    if len(outputs) != len(grid):
        raise ValueError(f"grid has {len(grid)} cells but {len(outputs)} outputs were given")
    s = grid.stride
    first = np.asarray(outputs[0])
    channels = first.shape[:-2]
    if len(channels) > 1:
        raise ValueError(f"outputs must be (s, s) or (C, s, s), got {first.shape}")
    out = np.zeros((grid.height, grid.width) + channels, dtype=first.dtype)
    for (r, c), o in zip(grid.origins, outputs):
        o = np.asarray(o)
        if o.shape != channels + (s, s):
            raise ValueError(f"output of shape {o.shape} does not fit a {s}x{s} window")
        out[r:r + s, c:c + s] = np.moveaxis(o, 0, -1) if channels else o
    return out


class AugTransform(enum.Enum):
    """The eight symmetries of the square.

    Composite members apply the rotation first, then the flip.
    """

    IDENTITY = "identity"
    HFLIP = "hflip"
    VFLIP = "vflip"
    ROT90 = "rot90"
    ROT180 = "rot180"
    ROT270 = "rot270"
    HFLIP_ROT90 = "hflip_rot90"
    VFLIP_ROT90 = "vflip_rot90"


ALL_TRANSFORMS = tuple(AugTransform)

_INVERSE = {
    AugTransform.IDENTITY: AugTransform.IDENTITY,
    AugTransform.HFLIP: AugTransform.HFLIP,
    AugTransform.VFLIP: AugTransform.VFLIP,
    AugTransform.ROT90: AugTransform.ROT270,
    AugTransform.ROT180: AugTransform.ROT180,
    AugTransform.ROT270: AugTransform.ROT90,
    AugTransform.HFLIP_ROT90: AugTransform.HFLIP_ROT90,
    AugTransform.VFLIP_ROT90: AugTransform.VFLIP_ROT90,
}


def apply_transform(x: np.ndarray, t: AugTransform) -> np.ndarray:
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"transforms need square spatial dims, got {x.shape[-2:]}")
    axes = (-2, -1)
    if t is AugTransform.IDENTITY:
        y = x
    elif t is AugTransform.HFLIP:
        y = x[..., ::-1]
    elif t is AugTransform.VFLIP:
        y = x[..., ::-1, :]
    elif t is AugTransform.ROT90:
        y = np.rot90(x, 1, axes)
    elif t is AugTransform.ROT180:
        y = np.rot90(x, 2, axes)
    elif t is AugTransform.ROT270:
        y = np.rot90(x, 3, axes)
    elif t is AugTransform.HFLIP_ROT90:
        y = np.rot90(x, 1, axes)[..., ::-1]
    else:
        y = np.rot90(x, 1, axes)[..., ::-1, :]
    return np.ascontiguousarray(y)


def invert(t: AugTransform) -> AugTransform:
    return _INVERSE[t]


def tta_predict(predict: Predictor, patches: np.ndarray, transforms=ALL_TRANSFORMS) -> np.ndarray:
    """Average of ``invert(t)(predict(t(patches)))`` over the transforms."""
    acc = None
    for t in transforms:
        out = apply_transform(predict(apply_transform(patches, t)), invert(t))
        acc = out.astype(np.float64) if acc is None else acc + out
    return (acc / len(transforms)).astype(np.float32)


def make_predictor(model, level: int | None = None) -> Predictor:
    """Wrap a U-Net or a stack as an eval-mode ``(N,C,P,P) -> (N,1,p,p)`` function."""

    def predict(batch: np.ndarray) -> np.ndarray:
        with no_record():
            if level is None:
                out = model.forward(Tensor(batch), mode="eval")
            else:
                out = model.forward(Tensor(batch), level, mode="eval")
        return out.data

    return predict


def threshold(scores: np.ndarray, tau: float) -> np.ndarray:
    if not 0 < tau < 1:
        raise ValueError(f"threshold {tau} must lie in (0, 1)")
    return (np.asarray(scores) >= tau).astype(np.uint8)


THRESHOLD_CANDIDATES = tuple(round(0.05 * k, 2) for k in range(1, 20))


def threshold_sweep(score_maps, gts, candidates=THRESHOLD_CANDIDATES) -> list[tuple[float, float]]:
    """Pooled IoU for every candidate threshold."""
    score_maps, gts = list(score_maps), list(gts)
    if not score_maps or len(score_maps) != len(gts):
        raise ValueError("need a non-empty, paired set of score maps and masks")
    curve = []
    for tau in candidates:
        tp = fp = fn = 0
        for s, g in zip(score_maps, gts):
            a, b, c, _ = confusion_counts(g, np.asarray(s) >= tau)
            tp, fp, fn = tp + a, fp + b, fn + c
        union = tp + fp + fn
        curve.append((tau, 1.0 if union == 0 else tp / union))
    return curve


def tune_threshold(score_maps, gts, candidates=THRESHOLD_CANDIDATES) -> tuple[float, list[tuple[float, float]]]:
    """Best threshold on a validation set (ties go to the lower value)."""
    curve = threshold_sweep(score_maps, gts, candidates)
    best_tau, best = curve[0]
    for tau, v in curve[1:]:
        if v > best:
            best_tau, best = tau, v
    return best_tau, curve


def parse_scale(scale) -> Fraction:
    f = Fraction(str(scale)) if not isinstance(scale, Fraction) else scale
    if f not in (Fraction(1), Fraction(1, 2), Fraction(1, 4)):
        raise ValueError(f"scale must be one of 1, 1/2, 1/4; got {scale}")
    return f


def rescale(raster: np.ndarray, factor, direction: str = "down") -> np.ndarray:
    """Box-average downscaling or bilinear upscaling by 1, 2 or 4.

    Upscaling samples source coordinates ``(i + 0.5) / k - 0.5`` (half-pixel
    centres, corners not aligned) and clamps at the borders.
    """
    f = parse_scale(factor)
    k = int(1 / f)
    x = np.asarray(raster, dtype=np.float32)
    if k == 1:
        return x.copy()
    h, w = x.shape[:2]
    if direction == "down":
        if h % k or w % k:
            raise ValueError(f"{h}x{w} is not divisible by {k}")
        return x.reshape(h // k, k, w // k, k, *x.shape[2:]).mean(axis=(1, 3)).astype(np.float32)
    if direction == "up":
        return _bilinear_axis(_bilinear_axis(x, k, 0), k, 1)
    raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")


def _bilinear_axis(x: np.ndarray, k: int, axis: int) -> np.ndarray:
    n = x.shape[axis]
    src = (np.arange(n * k) + 0.5) / k - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (src - lo).astype(np.float32)
    shape = [1] * x.ndim
    shape[axis] = n * k
    frac = frac.reshape(shape)
    a = np.take(x, lo, axis=axis)
    b = np.take(x, hi, axis=axis)
    return (a * (1 - frac) + b * frac).astype(np.float32)


@dataclass
class PredictionJob:
    raster: np.ndarray
    predictor: Predictor
    input_size: int
    margin: int
    threshold: float = 0.5
    tta: bool = True
    scale: Fraction | str | float = 1
    batch_size: int = 16

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        self.scale = parse_scale(self.scale)


@dataclass
class PredictionResult:
    mask: np.ndarray
    scores: np.ndarray
    timing: dict = field(default_factory=dict)


def predict_scores(raster: np.ndarray, predictor: Predictor, input_size: int, margin: int,
                   tta: bool = True, batch_size: int = 16) -> tuple[np.ndarray, int]:
    """Full-size score map for one raster at its native resolution."""
    h, w = raster.shape[:2]
    stride = input_size - 2 * margin
    # rasters smaller than one output window are reflected out to that size first
    grow_h, grow_w = max(0, stride - h), max(0, stride - w)
    if grow_h or grow_w:
        pad = [(0, grow_h), (0, grow_w)] + [(0, 0)] * (raster.ndim - 2)
        raster = np.pad(raster, pad, mode="symmetric")
    padded = mirror_pad(raster, margin)
    grid = plan_grid(raster.shape[:2], input_size, margin)
    outs = []
    for batch in extract_patches(padded, grid, batch_size):
        pred = tta_predict(predictor, batch) if tta else predictor(batch)
        outs.extend(pred[:, 0])
    return assemble(outs, grid)[:h, :w], len(grid)


def run_prediction(job: PredictionJob) -> PredictionResult:
    """Downscale, tile, predict, reassemble, upscale and threshold one raster."""
    timing = {"rescale_seconds": 0.0}
    x = np.asarray(job.raster, dtype=np.float32)
    h, w = x.shape[:2]
    t0 = time.perf_counter()
    if job.scale != 1:
        x = rescale(x, job.scale, "down")
    timing["rescale_seconds"] += time.perf_counter() - t0

    t0 = time.perf_counter()
    scores, n_patches = predict_scores(x, job.predictor, job.input_size, job.margin, job.tta, job.batch_size)
    timing["predict_seconds"] = time.perf_counter() - t0
    timing["patches"] = n_patches

    t0 = time.perf_counter()
    if job.scale != 1:
        scores = rescale(scores, job.scale, "up")
    timing["rescale_seconds"] += time.perf_counter() - t0
    assert scores.shape == (h, w)
    return PredictionResult(threshold(scores, job.threshold), np.clip(scores, 0.0, 1.0), timing)
