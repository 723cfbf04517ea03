"""Single U-Net vs two-level stack on the desk synthetic set, over several seeds.

Each seed trains level 0, scores it, trains level 1 on top and scores the
stack. Both scores use the same validation-tuned threshold procedure.
"""

import argparse
import logging
import statistics
from pathlib import Path

from stackseg.config import make_config
from stackseg.experiments import synth_splits, train_and_evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/stacking")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--no-tta", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = make_config("desk")
    data = synth_splits(cfg.synth_config(), Path(args.work) / "data")
    rows = []
    for seed in args.seeds:
        _, out = train_and_evaluate(cfg.stack_config(), [cfg.train_config(0), cfg.train_config(1)], data, seed,
                                    tta=not args.no_tta)
        rows.append(out.ious)
        print(f"seed {seed}\tsingle {out.ious[0]:.4f}\tstack {out.ious[1]:.4f}", flush=True)
    single, stack = zip(*rows)
    held = sum(b >= a - 0.005 for a, b in rows)
    print(f"mean\tsingle {statistics.fmean(single):.4f}\tstack {statistics.fmean(stack):.4f}")
    print(f"stack >= single - 0.005 in {held} of {len(rows)} seeds")


if __name__ == "__main__":
    main()
