"""Command-line entry point: ``stackseg <command> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.
Logs go to stderr; tables go to stdout or ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .checkpoint import CheckpointError
from .config import ConfigFileError, RunConfig, load_config, resolve_path
from .data import (DatasetError, DatasetManifest, load_dataset, read_image, read_mask, read_scores, split,
                   synth_generate, write_mask, write_scores)
from .experiments import (ScaleModel, downscale_samples, evaluate_level, format_resolution_table,
                          resolution_experiment, same_model_at_scales, score_samples)
from .metrics import NoBreakevenError, aggregate, evaluate, format_table, pooled_breakeven
from .model import ConfigError, build_stack
from .pipeline import PredictionJob, make_predictor, parse_scale, run_prediction, threshold_sweep, tune_threshold
from .train import MissingCheckpoint, TrainingDiverged, level_paths, load_stack, train_level

log = logging.getLogger("stackseg")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class Context:
    """Resolved configuration plus the paths it points at."""

    def __init__(self, args):
        self.args = args
        self.cfg_path = Path(args.config) if args.config else None
        self.cfg: RunConfig = load_config(self.cfg_path, args.profile)
        if args.seed is not None:
            self.cfg.training.seed = args.seed
            self.cfg.synth.seed = args.seed
        if getattr(args, "no_tta", False):
            self.cfg.pipeline.tta = False
        if getattr(args, "scale", None) is not None:
            self.cfg.pipeline.scale = args.scale
        self.cfg.validate()
        self.dataset = resolve_path(self.cfg_path, self.cfg.paths.dataset)
        self.checkpoints = resolve_path(self.cfg_path, self.cfg.paths.checkpoints)
        self.output = Path(args.out) if getattr(args, "out", None) else resolve_path(self.cfg_path, self.cfg.paths.output)

    def manifest(self) -> DatasetManifest:
        """Dataset with its persisted split (created on first use)."""
        man = load_dataset(self.dataset, self.cfg.data.binarize_masks)
        split_file = self.dataset / "splits.txt"
        if split_file.exists():
            man.read_splits(split_file)
        else:
            d = self.cfg.data
            split(man, d.val_fraction, np.random.default_rng(d.split_seed), d.test_fraction)
            man.save(split_file)
        return man

    def stack(self):
        return build_stack(self.cfg.stack_config(), np.random.default_rng(self.cfg.training.seed))


def _emit(text: str, out_file: Path | None) -> None:
    if out_file is None:
        sys.stdout.write(text)
    else:
        out_file.parent.mkdir(parents=True, exist_ok=True)
        out_file.write_text(text)
        log.info("wrote %s", out_file)


def cmd_synth(ctx: Context) -> int:
    scfg = ctx.cfg.synth_config()
    scfg.validate()
    man = synth_generate(scfg, ctx.dataset)
    fg = [read_mask(ctx.dataset / "gt" / f"{i}.png").mean() for i in man.ids]
    sys.stdout.write(f"tiles\t{len(man)}\ntile_size\t{scfg.tile_size}\nforeground_fraction\t{np.mean(fg):.4f}\n"
                     f"root\t{ctx.dataset}\n")
    return EXIT_OK


def _run_record_path(ctx: Context, name: str) -> Path:
    path = ctx.output / "records" / f"{name}_{ctx.cfg.digest()[:12]}.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _append(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def scale_checkpoints(base: Path, scale) -> Path:
    """Models trained on downscaled data live in a per-scale subdirectory."""
    f = parse_scale(scale)
    return base if f == 1 else base / f"scale_{f.numerator}_{f.denominator}"


def cmd_train(ctx: Context) -> int:
    level = ctx.args.level
    cfg = ctx.cfg
    scale = parse_scale(ctx.args.scale or "1")
    ckpt = scale_checkpoints(ctx.checkpoints, scale)
    if not 0 <= level < cfg.model.levels:
        raise UsageError(f"--level must be in [0, {cfg.model.levels - 1}]")
    for k in range(level):
        if not level_paths(ckpt, k)[0].exists():
            raise MissingCheckpoint(f"level {level} needs a trained level {k} checkpoint in {ckpt}")
    man = ctx.manifest()
    train, val, test = man.load_split("train"), man.load_split("val"), man.load_split("test")
    if any(s.image.shape[0] % scale.denominator or s.image.shape[1] % scale.denominator for s in train + val + test):
        raise DatasetError(f"image sizes must be divisible by {scale.denominator} to train at scale {scale}")
    stack = ctx.stack()
    record = _run_record_path(ctx, f"train_level{level}" + ("" if scale == 1 else f"_scale{scale.denominator}"))
    _append(record, {"type": "config", "digest": cfg.digest(), "config": cfg.to_dict(), "level": level,
                     "scale": str(scale)})
    ckpt.mkdir(parents=True, exist_ok=True)
    (ckpt / "config.yaml").write_text(cfg.to_yaml())
    t0 = time.perf_counter()
    result = train_level(stack, level, downscale_samples(train, scale), downscale_samples(val, scale),
                         cfg.train_config(level), ckpt, record)
    train_seconds = time.perf_counter() - t0
    final = {"type": "final", "level": level, "train_seconds": train_seconds, "epochs_run": len(result.epochs)}
    if test and val:
        held = evaluate_level(stack, level, val, test, cfg.pipeline.tta, cfg.pipeline.rho, scale=scale)
        final.update(tau=held.tau, metrics=held.report.as_row())
        sys.stdout.write(format_table([*held.per_sample, held.report]))
    _append(record, final)
    return EXIT_OK


def _load_model(ctx: Context, level: int | None):
    stack = ctx.stack()
    top = load_stack(stack, ctx.checkpoints, level)
    return stack, top


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        files = sorted(path.glob("*.png"))
        if not files:
            raise DatasetError(f"no PNG images in {path}")
        return files
    if not path.exists():
        raise DatasetError(f"{path} does not exist")
    return [path]


def cmd_predict(ctx: Context) -> int:
    cfg = ctx.cfg
    stack, top = _load_model(ctx, ctx.args.level)
    ucfg = stack.levels[top].cfg
    predict = make_predictor(stack, top)
    scale = parse_scale(cfg.pipeline.scale)
    ctx.output.mkdir(parents=True, exist_ok=True)
    rows = ["id\tpredict_seconds\trescale_seconds\tpatches"]
    for path in _input_images(Path(ctx.args.input)):
        try:
            image = read_image(path)
        except OSError as exc:
            raise DatasetError(f"cannot read {path}: {exc}") from exc
        k = int(1 / scale)
        if image.shape[0] % k or image.shape[1] % k:
            raise DatasetError(f"{path.name}: {image.shape[1]}x{image.shape[0]} is not divisible by {k} for scale {scale}")
        res = run_prediction(PredictionJob(image, predict, ucfg.input_size, ucfg.crop_margin, cfg.pipeline.threshold,
                                           cfg.pipeline.tta, scale, cfg.pipeline.batch_size))
        write_mask(ctx.output / f"{path.stem}_mask.png", res.mask)
        if ctx.args.save_scores:
            write_scores(ctx.output / f"{path.stem}_scores.png", res.scores)
        t = res.timing
        rows.append(f"{path.stem}\t{t['predict_seconds']:.4f}\t{t['rescale_seconds']:.4f}\t{t['patches']}")
        log.info("%s: predict %.3fs, rescale %.4fs", path.stem, t["predict_seconds"], t["rescale_seconds"])
    _emit("\n".join(rows) + "\n", ctx.output / "timing.tsv" if ctx.args.timing_file else None)
    return EXIT_OK


def _find(pred_dir: Path, stem: str, suffixes) -> Path | None:
    for suffix in suffixes:
        p = pred_dir / f"{stem}{suffix}.png"
        if p.exists():
            return p
    return None


def cmd_eval(ctx: Context) -> int:
    pred_dir, gt_dir = Path(ctx.args.pred), Path(ctx.args.gt)
    gts = sorted(gt_dir.glob("*.png"))
    if not gts:
        raise DatasetError(f"no ground-truth masks in {gt_dir}")
    mode = ctx.args.mode
    suffixes = ("_scores", "") if mode == "breakeven" else ("_mask", "")
    pairs = []
    for g in gts:
        p = _find(pred_dir, g.stem, suffixes)
        if p is None:
            raise DatasetError(f"no prediction for {g.stem} in {pred_dir}")
        pairs.append((g, p))
    rho = ctx.cfg.pipeline.rho
    reports, masks, scores = [], [], []
    for g, p in pairs:
        gt = read_mask(g, ctx.cfg.data.binarize_masks)
        if mode == "breakeven":
            s = read_scores(p)
            if s.shape != gt.shape:
                raise DatasetError(f"{p.name}: shape {s.shape} does not match {g.name}")
            masks.append(gt)
            scores.append(s)
            reports.append(evaluate(gt, s >= ctx.cfg.pipeline.threshold, g.stem, rho, scores=s))
        else:
            pred = read_mask(p)
            if pred.shape != gt.shape:
                raise DatasetError(f"{p.name}: shape {pred.shape} does not match {g.name}")
            reports.append(evaluate(gt, pred, g.stem, rho))
    overall = aggregate(reports)
    if mode == "breakeven" and ctx.args.breakeven_pooling == "pooled":
        overall.breakeven = pooled_breakeven(masks, scores, rho)
    _emit(format_table([*reports, overall]), Path(ctx.args.table) if ctx.args.table else None)
    return EXIT_OK


def cmd_tune_threshold(ctx: Context) -> int:
    man = ctx.manifest()
    val = man.load_split("val")
    if not val:
        raise DatasetError("the validation split is empty")
    stack, top = _load_model(ctx, ctx.args.level)
    maps = score_samples(stack, top, val, ctx.cfg.pipeline.tta, ctx.cfg.pipeline.batch_size)
    tau, curve = tune_threshold(maps, [s.mask for s in val])
    ctx.output.mkdir(parents=True, exist_ok=True)
    sweep = "tau\tiou\n" + "".join(f"{t:.2f}\t{v:.6f}\n" for t, v in curve)
    (ctx.output / "threshold_sweep.tsv").write_text(sweep)
    tuned = ctx.cfg.to_dict()
    tuned["pipeline"]["threshold"] = tau
    # the tuned file lives elsewhere, so its paths must not depend on its location
    tuned["paths"] = {"dataset": str(ctx.dataset.resolve()), "checkpoints": str(ctx.checkpoints.resolve()),
                      "output": str(ctx.output.resolve())}
    (ctx.output / "config.tuned.yaml").write_text(yaml.safe_dump(tuned, sort_keys=False))
    sys.stdout.write(sweep)
    sys.stdout.write(f"# best tau {tau:.2f}\n")
    return EXIT_OK


def cmd_resolution_exp(ctx: Context) -> int:
    man = ctx.manifest()
    test = man.load_split("test")
    if not test:
        raise DatasetError("the test split is empty")
    if ctx.args.per_scale_models:
        val = man.load_split("val")
        if not val:
            raise DatasetError("per-scale models need a validation split to tune their thresholds")
        models = []
        for scale in (Fraction(1), Fraction(1, 2), Fraction(1, 4)):
            stack = ctx.stack()
            top = load_stack(stack, scale_checkpoints(ctx.checkpoints, scale), ctx.args.level)
            tau, _ = tune_threshold(score_samples(stack, top, val, ctx.cfg.pipeline.tta, scale=scale),
                                    [s.mask for s in val])
            models.append(ScaleModel(scale, stack, top, tau))
    else:
        stack, top = _load_model(ctx, ctx.args.level if ctx.args.level is not None else 0)
        models = same_model_at_scales(stack, top, ctx.cfg.pipeline.threshold)
    rows = resolution_experiment(models, test, ctx.cfg.pipeline.tta, ctx.cfg.pipeline.batch_size, ctx.args.repeats)
    table = format_resolution_table(rows)
    record = _run_record_path(ctx, "resolution")
    _append(record, {"type": "config", "digest": ctx.cfg.digest(), "config": ctx.cfg.to_dict(), "level": top})
    _append(record, {"type": "final", "rows": [
        {"scale": str(r.scale), "iou": r.iou, "tau": m.tau, "predict_seconds": r.predict_seconds,
         "rescale_seconds": r.rescale_seconds, "patches": r.patches} for r, m in zip(rows, models)]})
    _emit(table, Path(ctx.args.table) if ctx.args.table else None)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "tune-threshold": cmd_tune_threshold,
    "resolution-exp": cmd_resolution_exp,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run config")
    common.add_argument("--profile", choices=("desk", "paper"), help="default set (overrides the file's profile)")
    common.add_argument("--seed", type=int, help="override training and synthesis seeds")
    common.add_argument("--out", help="output directory (default: paths.output)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="stackseg", description="Stacked U-Net segmentation of aerial imagery.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("synth", parents=[common], help="render the synthetic dataset")

    p = sub.add_parser("train", parents=[common], help="train one stack level")
    p.add_argument("--level", type=int, default=0)
    p.add_argument("--scale", choices=("1", "1/2", "1/4"), help="train on data downscaled by this factor")

    p = sub.add_parser("predict", parents=[common], help="predict masks for an image or a directory")
    p.add_argument("input")
    p.add_argument("--level", type=int, help="stack level to use (default: highest trained)")
    p.add_argument("--scale", choices=("1", "1/2", "1/4"))
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--save-scores", action="store_true", help="also write 16-bit score PNGs")
    p.add_argument("--timing-file", action="store_true", help="write timing.tsv instead of printing it")

    p = sub.add_parser("eval", parents=[common], help="score predicted masks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("iou", "breakeven"), default="iou")
    p.add_argument("--breakeven-pooling", choices=("pooled", "mean"), default="pooled")
    p.add_argument("--table", help="write the table here instead of stdout")

    p = sub.add_parser("tune-threshold", parents=[common], help="pick the threshold on the validation split")
    p.add_argument("--level", type=int)
    p.add_argument("--no-tta", action="store_true")

    p = sub.add_parser("resolution-exp", parents=[common], help="IoU and timing at scales 1, 1/2, 1/4")
    p.add_argument("--level", type=int)
    p.add_argument("--no-tta", action="store_true")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--per-scale-models", action="store_true",
                   help="use the models trained with train --scale, each with a threshold tuned on val")
    p.add_argument("--table", help="write the table here instead of stdout")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except (ConfigFileError, ConfigError, UsageError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (DatasetError, CheckpointError, NoBreakevenError)):
            log.error("%s", exc)
            return EXIT_RUNTIME
        log.error("invalid configuration: %s", exc)
        return EXIT_USAGE
    except (MissingCheckpoint, TrainingDiverged, OSError, FloatingPointError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
