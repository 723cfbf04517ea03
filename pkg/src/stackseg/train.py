"""Sequential per-level training of a stack with frozen predecessors."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import Sample, patch_sampler
from .losses import joint_loss
from .metrics import confusion_counts
from .model import StackedModel
from .optim import LrSchedule, NadamState, lr_for_epoch, nadam_step
from .pipeline import make_predictor
from .tensor import Tape, Tensor, backward

log = logging.getLogger(__name__)


LEVEL_INITS = ("previous", "scratch")


class TrainingDiverged(RuntimeError):
    pass


class MissingCheckpoint(FileNotFoundError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    schedule: LrSchedule
    batch_size: int = 8
    seed: int = 0
    patches_per_image: int = 4
    augment: bool = True
    empty_patch_keep: float = 1.0
    val_patches: int = 32
    jaccard_reduction: str = "pooled"
    # "previous": level k > 0 starts as a copy of level k - 1; "scratch": fresh He init
    level_init: str = "previous"

    def __post_init__(self):
        if self.level_init not in LEVEL_INITS:
            raise ValueError(f"level_init must be one of {LEVEL_INITS}, got {self.level_init!r}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    H: float
    J: float
    L: float
    val_iou: float
    seconds: float


@dataclass
class LevelResult:
    level: int
    epochs: list[EpochRecord] = field(default_factory=list)


def level_paths(ckpt_dir, level: int) -> tuple[Path, Path]:
    ckpt_dir = Path(ckpt_dir)
    return ckpt_dir / f"level{level}.sgsk", ckpt_dir / f"level{level}.opt.sgsk"


def write_stack_manifest(ckpt_dir, levels: int) -> None:
    """``manifest.txt``: one ``<level> <file>`` line per level, in order."""
    ckpt_dir = Path(ckpt_dir)
    lines = [f"{k}\t{level_paths(ckpt_dir, k)[0].name}" for k in range(levels) if level_paths(ckpt_dir, k)[0].exists()]
    (ckpt_dir / "manifest.txt").write_text("\n".join(lines) + "\n")


def read_stack_manifest(ckpt_dir) -> list[Path]:
    ckpt_dir = Path(ckpt_dir)
    path = ckpt_dir / "manifest.txt"
    if not path.exists():
        raise MissingCheckpoint(f"no checkpoint manifest in {ckpt_dir}")
    out = []
    for line in path.read_text().splitlines():
        if line.strip():
            _, name = line.split("\t")
            out.append(ckpt_dir / name)
    return out


def load_level(stack: StackedModel, level: int, ckpt_dir) -> None:
    path, _ = level_paths(ckpt_dir, level)
    if not path.exists():
        raise MissingCheckpoint(f"level {level} checkpoint {path} not found")
    stack.levels[level].load_state_dict(load_checkpoint(path))


def load_stack(stack: StackedModel, ckpt_dir, upto_level: int | None = None) -> int:
    """Load every available level (or up to ``upto_level``); returns the top level loaded."""
    files = read_stack_manifest(ckpt_dir)
    top = len(files) - 1 if upto_level is None else upto_level
    if top >= len(files):
        raise MissingCheckpoint(f"level {top} requested but only {len(files)} level(s) trained")
    for k in range(top + 1):
        load_level(stack, k, ckpt_dir)
    return top


def fixed_val_patches(samples: list[Sample], patch_size: int, margin: int, count: int, seed: int):
    """A deterministic validation batch used for the per-epoch IoU estimate."""
    if not samples or count <= 0:
        return None
    rng = np.random.default_rng([seed, 7919])
    per = max(1, -(-count // len(samples)))
    xs, ys = [], []
    for x, y in patch_sampler(samples, patch_size, margin, rng, augment=False, batch_size=count, patches_per_image=per):
        xs.append(x)
        ys.append(y)
    return np.concatenate(xs)[:count], np.concatenate(ys)[:count]


def patch_iou(stack: StackedModel, level: int, val, batch_size: int = 16) -> float:
    if val is None:
        return float("nan")
    predict = make_predictor(stack, level)
    x, y = val
    tp = fp = fn = 0
    for i in range(0, len(x), batch_size):
        p = predict(x[i:i + batch_size]) >= 0.5
        a, b, c, _ = confusion_counts(y[i:i + batch_size], p)
        tp, fp, fn = tp + a, fp + b, fn + c
    return 1.0 if tp + fp + fn == 0 else tp / (tp + fp + fn)


def train_level(stack: StackedModel, level: int, train: list[Sample], val: list[Sample], cfg: TrainConfig,
                ckpt_dir=None, log_path=None) -> LevelResult:
    """Train ``stack.levels[level]`` on random patches; lower levels stay frozen.

    Each epoch draws its patches from an RNG seeded by (seed, level, epoch),
    so a run resumed from its per-epoch checkpoint replays exactly the same
    batches as an uninterrupted one.
    """
    unet = stack.levels[level]
    params = unet.parameters()
    state = NadamState()
    start_epoch = 0
    if ckpt_dir is not None:
        ckpt_dir = Path(ckpt_dir)
        ckpt_dir.mkdir(parents=True, exist_ok=True)
        for k in range(level):
            load_level(stack, k, ckpt_dir)
        path, opt_path = level_paths(ckpt_dir, level)
        if path.exists() and opt_path.exists():
            unet.load_state_dict(load_checkpoint(path))
            opt = load_checkpoint(opt_path)
            state.load_state_dict(opt, params)
            start_epoch = int(opt["train/epochs_done"].reshape(-1)[0])
            log.info("level %d: resuming after epoch %d", level, start_epoch)

    if level > 0 and start_epoch == 0 and cfg.level_init == "previous":
        stack.init_from_previous(level)

    cfg_in = unet.cfg
    patch, margin = cfg_in.input_size, cfg_in.crop_margin
    val_set = fixed_val_patches(val, patch, margin, cfg.val_patches, cfg.seed)
    result = LevelResult(level)
    for epoch in range(start_epoch, cfg.schedule.total_epochs):
        lr = lr_for_epoch(cfg.schedule, epoch)
        rng = np.random.default_rng([cfg.seed, level, epoch])
        t0 = time.perf_counter()
        sums = np.zeros(3)
        steps = 0
        for x, y in patch_sampler(train, patch, margin, rng, cfg.augment, cfg.batch_size,
                                  cfg.patches_per_image, cfg.empty_patch_keep):
            try:
                with Tape() as tape:
                    out = stack.forward(Tensor(x), level, mode="train")
                    parts = joint_loss(y, out, cfg.jaccard_reduction)
                values = parts.values()
                if not np.isfinite(values).all():
                    raise FloatingPointError("loss")
                backward(parts.L, tape)
                nadam_step(params, state, lr)
            except FloatingPointError as exc:
                # the checkpoint on disk is still the last completed epoch
                raise TrainingDiverged(f"non-finite values at level {level}, epoch {epoch}: {exc}") from exc
            for p in params:
                p.zero_grad()
            tape.clear()
            sums += values
            steps += 1
        means = sums / max(steps, 1)
        rec = EpochRecord(epoch, lr, *map(float, means), patch_iou(stack, level, val_set), time.perf_counter() - t0)
        result.epochs.append(rec)
        log.info("level %d epoch %d lr %.0e H %.4f J %.4f L %.4f val_iou %.4f (%.1fs)",
                 level, epoch, lr, rec.H, rec.J, rec.L, rec.val_iou, rec.seconds)
        if ckpt_dir is not None:
            path, opt_path = level_paths(ckpt_dir, level)
            save_checkpoint(path, unet.state_dict())
            opt = state.state_dict()
            opt["train/epochs_done"] = np.array(epoch + 1, dtype=np.float32)
            save_checkpoint(opt_path, opt)
            write_stack_manifest(ckpt_dir, len(stack.levels))
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps({"type": "epoch", "level": level, **asdict(rec)}) + "\n")
    return result
