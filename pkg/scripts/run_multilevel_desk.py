"""Multi-level training against fixed-depth baselines, desk scale.

Runs the 3-cycle schedule (2-2-2 at h=1 doubling to 8-8-8 at h=1/4)
and the two controls trained under the same step budget: the shallow
first-cycle architecture and the deep last-cycle architecture. Reports
wall-clock saving of the multi-level run against the deep control and
the final test errors of all three.

Writes one summary CSV per run plus a combined comparison.csv.
"""
import argparse
import os

from odenet.csvio import write_csv
from odenet.data import AugmentConfig, DataFeed, balanced_subset, load_cifar10, synthesize
from odenet.model import ResNetSpec
from odenet.multilevel import (OptimizerSettings, baseline_train,
                               plan_schedule, train, write_summary)


def build_feed(args):
    if args.data_dir:
        train_ds, test_ds = load_cifar10(args.data_dir)
        if args.subset:
            train_ds = balanced_subset(train_ds, args.subset)
    else:
        train_ds, test_ds = synthesize(args.subset or 5000, 1000, hw=args.hw,
                                       num_classes=10, seed=1234)
    aug = AugmentConfig(pad=max(1, train_ds.hw // 8), random_crop=True,
                        hflip=True, standardize="per_image")
    return DataFeed(train_ds, test_ds, batch_size=args.batch_size, augment=aug,
                    seed=args.seed)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/multilevel")
    ap.add_argument("--data-dir", default="")
    ap.add_argument("--subset", type=int, default=5000)
    ap.add_argument("--hw", type=int, default=16)
    ap.add_argument("--batch-size", type=int, default=100)
    ap.add_argument("--epochs", type=float, default=10.0)
    ap.add_argument("--k", type=int, default=2, help="number of doublings")
    ap.add_argument("--base-blocks", default="2,2,2")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if args.quick:
        args.subset, args.epochs, args.hw = 1000, 2.0, 16

    feed = build_feed(args)
    blocks = tuple(int(b) for b in args.base_blocks.split(","))
    total_steps = max(1, round(args.epochs * feed.steps_per_epoch))
    sched = plan_schedule(blocks, args.k, total_steps)
    spec = ResNetSpec(blocks_per_stage=blocks, step_size=1.0,
                      step_size_mode="explicit",
                      input_channels=feed.train.channels,
                      input_hw=feed.train.hw, num_classes=10)
    opt = OptimizerSettings()
    os.makedirs(args.out, exist_ok=True)

    results = {}
    for name, runner in [
            ("multilevel", lambda: train(sched, feed, spec, opt, seed=args.seed)),
            ("first_cycle", lambda: baseline_train("first_cycle", sched, feed,
                                                   spec, opt, seed=args.seed)),
            ("last_cycle", lambda: baseline_train("last_cycle", sched, feed,
                                                  spec, opt, seed=args.seed))]:
        _, report = runner()
        err = report.final_test_error
        wall = report.wall_seconds_total
        results[name] = (err, wall)
        write_summary(os.path.join(args.out, f"summary_{name}.csv"), report)
        print(f"{name:<12s} error={err:.4f} wall={wall:.1f}s")

    saved = 1.0 - results["multilevel"][1] / results["last_cycle"][1]
    print(f"wall-clock saved vs last_cycle: {saved:.1%}")
    write_csv(os.path.join(args.out, "comparison.csv"),
              ["run", "test_error", "wall_seconds"],
              [(k, v[0], v[1]) for k, v in results.items()])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
