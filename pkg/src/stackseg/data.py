"""Datasets on disk, train/val/test splits, training patch sampling and a
synthetic building-footprint generator.

Directory convention::

    root/images/<id>.png   8-bit RGB
    root/gt/<id>.png       8-bit single channel, 0 = background, 255 = building
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .pipeline import ALL_TRANSFORMS, apply_transform, mirror_pad

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 in {0, 1}

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DatasetError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path, binarize: bool = False) -> np.ndarray:
    """0/255 single-channel mask -> {0, 1} uint8.

    Other values are rejected unless ``binarize`` is set, in which case
    anything >= 128 becomes foreground.
    """
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    if binarize:
        return (arr >= 128).astype(np.uint8)
    vals = np.unique(arr)
    if not np.isin(vals, (0, 255)).all():
        raise DatasetError(f"{path}: mask values {vals[~np.isin(vals, (0, 255))][:5].tolist()} are not 0/255")
    return (arr == 255).astype(np.uint8)


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def write_image(path, image: np.ndarray) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def write_scores(path, scores: np.ndarray) -> None:
    """Score map as 16-bit PNG holding round(score * 65535)."""
    arr = np.rint(np.clip(scores, 0, 1) * 65535).astype(np.uint16)
    Image.fromarray(arr).save(path)


def read_scores(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    return arr.astype(np.float32) / 65535.0


@dataclass
class DatasetManifest:
    root: Path
    ids: list[str]
    splits: dict[str, str] = field(default_factory=dict)
    rejected: list[tuple[str, str]] = field(default_factory=list)
    binarize: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    def split_ids(self, split: str) -> list[str]:
        return [i for i in self.ids if self.splits.get(i) == split]

    def load(self, sample_id: str) -> Sample:
        return Sample(
            sample_id,
            read_image(self.root / "images" / f"{sample_id}.png"),
            read_mask(self.root / "gt" / f"{sample_id}.png", self.binarize),
        )

    def load_split(self, split: str) -> list[Sample]:
        return [self.load(i) for i in self.split_ids(split)]

    def save(self, path) -> None:
        """Line-oriented ``id<TAB>split`` file."""
        lines = [f"{i}\t{self.splits.get(i, '')}" for i in self.ids]
        Path(path).write_text("\n".join(lines) + "\n")

    def read_splits(self, path) -> None:
        splits = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            sample_id, _, split = line.partition("\t")
            if sample_id not in self.ids:
                raise DatasetError(f"split file names unknown sample {sample_id!r}")
            if split and split not in SPLITS:
                raise DatasetError(f"unknown split {split!r} for {sample_id}")
            splits[sample_id] = split
        self.splits = splits


def load_dataset(root, binarize: bool = False) -> DatasetManifest:
    """Pair ``images/*.png`` with ``gt/*.png`` by basename and validate each pair.

    Unpaired files are an error. Pairs with mismatched sizes or malformed
    masks are skipped and listed in ``manifest.rejected``.
    """
    root = Path(root)
    images = {p.stem for p in (root / "images").glob("*.png")}
    masks = {p.stem for p in (root / "gt").glob("*.png")}
    if images ^ masks:
        raise DatasetError(f"unpaired files: {sorted(images ^ masks)[:10]}")
    if not images:
        raise DatasetError(f"no samples found under {root}")
    ids, rejected = [], []
    for sample_id in sorted(images):
        with Image.open(root / "images" / f"{sample_id}.png") as im:
            size = im.size
        try:
            mask = read_mask(root / "gt" / f"{sample_id}.png", binarize)
        except DatasetError as exc:
            rejected.append((sample_id, f"malformed mask: {exc}"))
            continue
        if mask.shape[::-1] != size:
            rejected.append((sample_id, f"size mismatch: image {size[0]}x{size[1]}, mask {mask.shape[1]}x{mask.shape[0]}"))
            continue
        ids.append(sample_id)
    for sample_id, reason in rejected:
        log.warning("rejected %s: %s", sample_id, reason)
    if not ids:
        raise DatasetError(f"no valid samples under {root}")
    return DatasetManifest(root, ids, {}, rejected, binarize)


def split(manifest: DatasetManifest, val_fraction: float, rng: np.random.Generator,
          test_fraction: float = 0.0) -> DatasetManifest:
    """Random train/val(/test) assignment, written into ``manifest.splits``."""
    if not 0 < val_fraction < 1 or not 0 <= test_fraction < 1 or val_fraction + test_fraction >= 1:
        raise DatasetError("fractions must be in (0, 1) and leave room for training data")
    n = len(manifest.ids)
    if n < 2:
        raise DatasetError("need at least two samples to split")
    n_val = max(1, int(round(n * val_fraction)))
    n_test = int(round(n * test_fraction))
    if test_fraction > 0:
        n_test = max(1, n_test)
    if n_val + n_test >= n:
        raise DatasetError(f"{n} samples are too few for the requested split")
    order = rng.permutation(n)
    splits = {}
    for rank, idx in enumerate(order):
        splits[manifest.ids[idx]] = "val" if rank < n_val else "test" if rank < n_val + n_test else "train"
    manifest.splits = splits
    return manifest


def patch_sampler(samples: list[Sample], patch_size: int, margin: int, rng: np.random.Generator,
                  augment: bool = True, batch_size: int = 8, patches_per_image: int = 4,
                  empty_patch_keep: float = 1.0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of random training patches.

    Yields ``(images, targets)`` with shapes ``(B, 3, P, P)`` and
    ``(B, 1, P - 2m, P - 2m)``. Origins are uniform over the mirror-padded
    raster so every target window lies inside the original image. With
    ``augment`` one random dihedral transform is applied to image and mask
    together before the target is centre-cropped. Patches whose target is
    all background are kept with probability ``empty_patch_keep``.
    """
    if not samples:
        raise DatasetError("no samples to draw patches from")
    padded = [(mirror_pad(s.image, margin), mirror_pad(s.mask, margin)) for s in samples]
    order = rng.permutation(np.repeat(np.arange(len(samples)), patches_per_image))
    out = patch_size - 2 * margin
    imgs, tgts = [], []
    for idx in order:
        img, msk = padded[idx]
        h, w = msk.shape
        if h < patch_size or w < patch_size:
            raise DatasetError(f"{samples[idx].id} is smaller than a patch after padding")
        r = int(rng.integers(0, h - patch_size + 1))
        c = int(rng.integers(0, w - patch_size + 1))
        x = np.moveaxis(img[r:r + patch_size, c:c + patch_size], -1, 0)
        y = msk[r:r + patch_size, c:c + patch_size]
        if augment:
            t = ALL_TRANSFORMS[int(rng.integers(len(ALL_TRANSFORMS)))]
            x = apply_transform(x, t)
            y = apply_transform(y, t)
        y = y[margin:margin + out, margin:margin + out]
        if empty_patch_keep < 1.0 and not y.any() and rng.random() >= empty_patch_keep:
            continue
        imgs.append(x)
        tgts.append(y[None])
        if len(imgs) == batch_size:
            yield np.stack(imgs).astype(np.float32), np.stack(tgts).astype(np.float32)
            imgs, tgts = [], []
    if imgs:
        yield np.stack(imgs).astype(np.float32), np.stack(tgts).astype(np.float32)


# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    count: int = 60
    tile_size: int = 512
    buildings: tuple[int, int] = (10, 22)
    size_range: tuple[int, int] = (16, 48)
    rotation: bool = True
    rotated_fraction: float = 0.3
    arbitrary_angles: bool = False
    touching_fraction: float = 0.2
    noise: float = 0.04
    roads: tuple[int, int] = (0, 2)

    def validate(self) -> None:
        if self.tile_size % 16:
            raise ValueError(f"tile_size {self.tile_size} must be divisible by 16")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        lo, hi = self.buildings
        if lo < 0 or hi < lo:
            raise ValueError(f"bad building count range {self.buildings}")
        lo, hi = self.size_range
        if lo < 2 or hi < lo or hi >= self.tile_size // 2:
            raise ValueError(f"bad building size range {self.size_range}")
        if not 0 <= self.rotated_fraction <= 1 or not 0 <= self.touching_fraction <= 1:
            raise ValueError("fractions must lie in [0, 1]")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    def expected_foreground(self) -> float:
        """Expected mask fraction when every building is placed."""
        mean_count = sum(self.buildings) / 2
        mean_side = sum(self.size_range) / 2
        return mean_count * mean_side**2 / self.tile_size**2


GROUND_COLORS = np.array([[0.36, 0.45, 0.25], [0.45, 0.42, 0.30], [0.30, 0.38, 0.28], [0.50, 0.48, 0.40]])
ROOF_COLORS = np.array([[0.72, 0.25, 0.20], [0.62, 0.62, 0.68], [0.82, 0.74, 0.58], [0.35, 0.36, 0.48], [0.88, 0.88, 0.86]])
ROAD_COLOR = np.array([0.55, 0.55, 0.55])


def _smooth_noise(rng: np.random.Generator, size: int, cell: int, channels: int) -> np.ndarray:
    from scipy.ndimage import zoom

    n = size // cell + 2
    coarse = rng.standard_normal((n, n, channels))
    fine = zoom(coarse, (cell, cell, 1), order=1)
    return fine[:size, :size]


def _rect_mask(size: int, cx: float, cy: float, w: float, h: float, angle: float) -> tuple[np.ndarray, tuple[slice, slice]]:
    """Pixels whose centres fall inside the rotated rectangle, within its bounding box."""
    r = 0.5 * np.hypot(w, h) + 1
    y0, y1 = max(0, int(cy - r)), min(size, int(np.ceil(cy + r)) + 1)
    x0, x1 = max(0, int(cx - r)), min(size, int(np.ceil(cx + r)) + 1)
    ys, xs = np.mgrid[y0:y1, x0:x1]
    dx, dy = xs + 0.5 - cx, ys + 0.5 - cy
    ca, sa = np.cos(angle), np.sin(angle)
    u = dx * ca + dy * sa
    v = -dx * sa + dy * ca
    return (np.abs(u) < w / 2) & (np.abs(v) < h / 2), (slice(y0, y1), slice(x0, x1))


def render_tile(cfg: SynthConfig, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One synthetic tile as (uint8 RGB image, {0,1} mask)."""
    size = cfg.tile_size
    base = GROUND_COLORS[rng.integers(len(GROUND_COLORS))]
    img = base + 0.06 * _smooth_noise(rng, size, 64, 3) + 0.03 * _smooth_noise(rng, size, 8, 1)
    mask = np.zeros((size, size), dtype=bool)

    for _ in range(int(rng.integers(cfg.roads[0], cfg.roads[1] + 1))):
        width = int(rng.integers(6, 14))
        pos = int(rng.integers(0, size - width))
        color = ROAD_COLOR + rng.uniform(-0.05, 0.05)
        if rng.random() < 0.5:
            img[pos:pos + width] = color
        else:
            img[:, pos:pos + width] = color

    placed: list[tuple[float, float, int, int]] = []
    n_build = int(rng.integers(cfg.buildings[0], cfg.buildings[1] + 1))
    lo, hi = cfg.size_range
    for _ in range(n_build):
        w = int(rng.integers(lo, hi + 1))
        h = int(rng.integers(lo, hi + 1))
        angle = 0.0
        if cfg.rotation and rng.random() < cfg.rotated_fraction:
            angle = rng.uniform(0, np.pi) if cfg.arbitrary_angles else np.pi / 4
        roof = np.clip(ROOF_COLORS[rng.integers(len(ROOF_COLORS))] + rng.uniform(-0.04, 0.04, 3), 0, 1)
        touch = angle == 0.0 and placed and rng.random() < cfg.touching_fraction
        for attempt in range(60):
            if touch and attempt < 10:
                # flush against a random side of an earlier axis-aligned building
                pcx, pcy, pw, ph = placed[int(rng.integers(len(placed)))]
                side = int(rng.integers(4))
                if side == 0:
                    cx, cy = pcx + (pw + w) / 2, pcy + rng.uniform(-ph / 2, ph / 2)
                elif side == 1:
                    cx, cy = pcx - (pw + w) / 2, pcy + rng.uniform(-ph / 2, ph / 2)
                elif side == 2:
                    cx, cy = pcx + rng.uniform(-pw / 2, pw / 2), pcy + (ph + h) / 2
                else:
                    cx, cy = pcx + rng.uniform(-pw / 2, pw / 2), pcy - (ph + h) / 2
                cx, cy = round(cx - w / 2) + w / 2, round(cy - h / 2) + h / 2
            else:
                ext = 0.5 * np.hypot(w, h) if angle else 0.5 * max(w, h)
                cx = rng.uniform(ext + 2, size - ext - 2)
                cy = rng.uniform(ext + 2, size - ext - 2)
            ext_x = 0.5 * np.hypot(w, h) if angle else w / 2
            ext_y = 0.5 * np.hypot(w, h) if angle else h / 2
            if cx - ext_x < 1 or cy - ext_y < 1 or cx + ext_x > size - 1 or cy + ext_y > size - 1:
                continue
            footprint, win = _rect_mask(size, cx, cy, w, h, angle)
            if (mask[win] & footprint).any():
                continue
            mask[win] |= footprint
            region = img[win]
            region[footprint] = roof + 0.02 * rng.standard_normal(3)
            if angle == 0.0:
                placed.append((cx, cy, w, h))
            break

    img = img + cfg.noise * rng.standard_normal(img.shape)
    return np.clip(np.rint(img * 255), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def synth_generate(cfg: SynthConfig, root) -> DatasetManifest:
    """Render ``cfg.count`` tiles into ``root/images`` and ``root/gt``."""
    cfg.validate()
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    ids = []
    for k in range(cfg.count):
        sample_id = f"synth_{k:04d}"
        img, mask = render_tile(cfg, np.random.default_rng([cfg.seed, k]))
        Image.fromarray(img, mode="RGB").save(root / "images" / f"{sample_id}.png")
        write_mask(root / "gt" / f"{sample_id}.png", mask)
        ids.append(sample_id)
    return DatasetManifest(root, ids)
