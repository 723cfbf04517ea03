"""Held-out IoU and prediction time at full, half and quarter resolution.

One single U-Net is trained per resolution on tiles resampled to it. Its
scores are upsampled to full resolution before thresholding and scoring.
"""

import argparse
import logging
from fractions import Fraction
from pathlib import Path

from stackseg.config import make_config
from stackseg.experiments import ScaleModel, format_resolution_table, resolution_experiment, synth_splits, train_and_evaluate
from stackseg.model import StackConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/resolution")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-tta", action="store_true")
    ap.add_argument("--repeats", type=int, default=3)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = make_config("desk")
    data = synth_splits(cfg.synth_config(), Path(args.work) / "data")
    single = StackConfig.uniform(cfg.unet_config(0), 1)
    models = []
    for scale in (Fraction(1), Fraction(1, 2), Fraction(1, 4)):
        stack, out = train_and_evaluate(single, [cfg.train_config(0)], data, args.seed, not args.no_tta, scale=scale)
        models.append(ScaleModel(scale, stack, 0, out.levels[0].tau))
    rows = resolution_experiment(models, data.test, not args.no_tta, cfg.pipeline.batch_size, args.repeats)
    print(format_resolution_table(rows), end="")
    full = rows[0]
    for r in rows[1:]:
        print(f"# {r.scale}: {full.predict_seconds / r.predict_seconds:.2f}x faster, "
              f"IoU drop {100 * (full.iou - r.iou):.2f} points, "
              f"rescale {100 * r.rescale_seconds / r.predict_seconds:.1f}% of predict time")


if __name__ == "__main__":
    main()
