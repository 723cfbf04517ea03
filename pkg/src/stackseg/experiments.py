"""Evaluation drivers shared by the CLI, the scripts and the acceptance tests."""

from __future__ import annotations

import logging
import statistics
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .data import Sample, SynthConfig, load_dataset, split, synth_generate
from .metrics import MetricsReport, aggregate, evaluate
from .model import StackConfig, StackedModel, build_stack
from .pipeline import (PredictionJob, make_predictor, predict_scores, rescale, run_prediction, threshold,
                       tune_threshold)
from .train import TrainConfig, train_level

log = logging.getLogger(__name__)


def score_samples(stack: StackedModel, level: int, samples: list[Sample], tta: bool = True,
                  batch_size: int = 16, scale=1) -> list[np.ndarray]:
    """Full-resolution score maps; with ``scale`` < 1 the model sees downscaled images."""
    cfg = stack.levels[level].cfg
    predict = make_predictor(stack, level)
    maps = []
    for s in samples:
        image = s.image if scale == 1 else rescale(s.image, scale, "down")
        scores = predict_scores(image, predict, cfg.input_size, cfg.crop_margin, tta, batch_size)[0]
        maps.append(scores if scale == 1 else rescale(scores, scale, "up"))
    return maps


def downscale_samples(samples: list[Sample], scale) -> list[Sample]:
    """Training data at a lower resolution: box-averaged images, masks re-binarised at 0.5 coverage."""
    if scale == 1:
        return list(samples)
    return [Sample(s.id, rescale(s.image, scale, "down"),
                   (rescale(s.mask.astype(np.float32), scale, "down") >= 0.5).astype(np.uint8)) for s in samples]


@dataclass
class HeldOutResult:
    tau: float
    report: MetricsReport
    per_sample: list[MetricsReport] = field(default_factory=list)
    sweep: list = field(default_factory=list)

    @property
    def iou(self) -> float:
        return self.report.iou


def evaluate_level(stack: StackedModel, level: int, val: list[Sample], test: list[Sample], tta: bool = True,
                   rho: int = 3, tau: float | None = None, scale=1) -> HeldOutResult:
    """Tune the threshold on ``val`` (unless given) and score ``test`` at that threshold.

    Scores are always compared with the full-resolution masks.
    """
    sweep = []
    if tau is None:
        tau, sweep = tune_threshold(score_samples(stack, level, val, tta, scale=scale), [s.mask for s in val])
    reports = [evaluate(s.mask, threshold(sc, tau), s.id, rho)
               for s, sc in zip(test, score_samples(stack, level, test, tta, scale=scale))]
    return HeldOutResult(tau, aggregate(reports), reports, sweep)


@dataclass
class Splits:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]


def load_splits(root, val_fraction: float = 0.1, test_fraction: float = 0.1, split_seed: int = 0,
                binarize: bool = False) -> Splits:
    man = split(load_dataset(root, binarize), val_fraction, np.random.default_rng(split_seed), test_fraction)
    return Splits(man.load_split("train"), man.load_split("val"), man.load_split("test"))


def rotation_heavy(cfg: SynthConfig) -> SynthConfig:
    """Variant where most buildings sit at arbitrary angles."""
    return replace(cfg, rotation=True, rotated_fraction=0.8, arbitrary_angles=True)


def synth_splits(cfg: SynthConfig, root, val_fraction: float = 0.1, test_fraction: float = 0.1,
                 split_seed: int = 0) -> Splits:
    synth_generate(cfg, root)
    return load_splits(root, val_fraction, test_fraction, split_seed)


@dataclass
class RunOutcome:
    seed: int
    levels: list[HeldOutResult] = field(default_factory=list)
    train_seconds: list[float] = field(default_factory=list)
    eval_seconds: list[float] = field(default_factory=list)

    @property
    def ious(self) -> list[float]:
        return [r.iou for r in self.levels]


def train_and_evaluate(stack_cfg: StackConfig, train_cfgs: list[TrainConfig], data: Splits, seed: int,
                       tta: bool = True, ckpt_dir=None, scale=1) -> tuple[StackedModel, RunOutcome]:
    """Build a stack from ``seed``, train each level in turn and score it on the held-out split.

    ``seed`` drives both the initial weights and the patch sampling. With
    ``scale`` < 1 training sees downscaled tiles and scoring runs at that
    scale against full-resolution masks.
    """
    stack = build_stack(stack_cfg, np.random.default_rng(seed))
    outcome = RunOutcome(seed)
    train, val = downscale_samples(data.train, scale), downscale_samples(data.val, scale)
    for level, tcfg in enumerate(train_cfgs):
        t0 = time.perf_counter()
        train_level(stack, level, train, val, replace(tcfg, seed=seed), ckpt_dir)
        t1 = time.perf_counter()
        outcome.levels.append(evaluate_level(stack, level, data.val, data.test, tta, scale=scale))
        outcome.train_seconds.append(t1 - t0)
        outcome.eval_seconds.append(time.perf_counter() - t1)
        log.info("seed %d level %d: held-out IoU %.4f (tau %.2f)", seed, level, outcome.levels[-1].iou,
                 outcome.levels[-1].tau)
    return stack, outcome


@dataclass
class ResolutionRow:
    scale: Fraction
    iou: float
    predict_seconds: float
    rescale_seconds: float
    patches: int


@dataclass
class ScaleModel:
    scale: Fraction
    stack: StackedModel
    level: int
    tau: float


def same_model_at_scales(stack: StackedModel, level: int, tau: float,
                         scales=(Fraction(1), Fraction(1, 2), Fraction(1, 4))) -> list[ScaleModel]:
    return [ScaleModel(Fraction(s), stack, level, tau) for s in scales]


def resolution_experiment(models: list[ScaleModel], test: list[Sample], tta: bool = True, batch_size: int = 16,
                          repeats: int = 1) -> list[ResolutionRow]:
    """Predict the test tiles at each model's scale; IoU is measured at full resolution.

    Timings are per tile and take the fastest of ``repeats`` passes to damp
    scheduler noise.
    """
    rows = []
    for m in models:
        cfg = m.stack.levels[m.level].cfg
        predict = make_predictor(m.stack, m.level)
        reports, pred_t, resc_t, patches = [], [], [], 0
        for s in test:
            best = None
            for _ in range(repeats):
                job = PredictionJob(s.image, predict, cfg.input_size, cfg.crop_margin, m.tau, tta, m.scale, batch_size)
                res = run_prediction(job)
                if best is None or res.timing["predict_seconds"] < best.timing["predict_seconds"]:
                    best = res
            reports.append(evaluate(s.mask, best.mask, s.id))
            pred_t.append(best.timing["predict_seconds"])
            resc_t.append(best.timing["rescale_seconds"])
            patches += best.timing["patches"]
        rows.append(ResolutionRow(Fraction(m.scale), aggregate(reports).iou, statistics.fmean(pred_t),
                                  statistics.fmean(resc_t), patches))
        log.info("scale %s: IoU %.4f, predict %.3fs/tile, rescale %.4fs/tile", m.scale, rows[-1].iou,
                 rows[-1].predict_seconds, rows[-1].rescale_seconds)
    return rows


def format_resolution_table(rows: list[ResolutionRow]) -> str:
    lines = ["resolution\tiou\tpredict_seconds_per_tile\trescale_seconds_per_tile\tpatches"]
    for r in rows:
        lines.append(f"{r.scale}\t{r.iou:.4f}\t{r.predict_seconds:.4f}\t{r.rescale_seconds:.4f}\t{r.patches}")
    return "\n".join(lines) + "\n"


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    @property
    def elapsed(self) -> float:
        return time.perf_counter() - self.start
