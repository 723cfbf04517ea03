"""Training with and without dihedral augmentation on a rotation-heavy synthetic set."""

import argparse
import logging
import statistics
from dataclasses import replace
from pathlib import Path

from stackseg.config import make_config
from stackseg.experiments import rotation_heavy, synth_splits, train_and_evaluate
from stackseg.model import StackConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--work", default="runs/augmentation")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--tta", action="store_true", help="score with test-time augmentation")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = make_config("desk")
    data = synth_splits(rotation_heavy(cfg.synth_config()), Path(args.work) / "data")
    single = StackConfig.uniform(cfg.unet_config(0), 1)
    scores = {True: [], False: []}
    for seed in args.seeds:
        for augment in (True, False):
            tcfg = replace(cfg.train_config(0), augment=augment)
            _, out = train_and_evaluate(single, [tcfg], data, seed, tta=args.tta)
            scores[augment].append(out.ious[0])
            print(f"seed {seed}\taugment {augment}\tiou {out.ious[0]:.4f}", flush=True)
    print(f"mean\taugment {statistics.fmean(scores[True]):.4f}\tno_augment {statistics.fmean(scores[False]):.4f}")


if __name__ == "__main__":
    main()
