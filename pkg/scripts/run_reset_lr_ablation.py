"""Ablation: restart the cosine learning-rate curve at each cycle, or not.

The multi-level schedule restarts the cosine decay from eta_max whenever
the model doubles, on the theory that freshly inserted blocks need a hot
learning rate again. The alternative stretches a single cosine curve
over the whole run. This script trains both variants on the same data
and seed and reports their final test errors.
"""
import argparse
import os

from odenet.csvio import write_csv
from odenet.data import AugmentConfig, DataFeed, balanced_subset, load_cifar10, synthesize
from odenet.model import ResNetSpec
from odenet.multilevel import OptimizerSettings, plan_schedule, train


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
    ap.add_argument("--out", default="runs/reset_lr")
    ap.add_argument("--data-dir", default="")
    ap.add_argument("--subset", type=int, default=5000)
    ap.add_argument("--hw", type=int, default=16)
    ap.add_argument("--batch-size", type=int, default=100)
    ap.add_argument("--epochs", type=float, default=10.0)
    ap.add_argument("--k", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if args.quick:
        args.subset, args.epochs = 1000, 2.0

    feed = build_feed(args)
    total_steps = max(1, round(args.epochs * feed.steps_per_epoch))
    blocks = (2, 2, 2)
    sched = plan_schedule(blocks, args.k, total_steps)
    spec = ResNetSpec(blocks_per_stage=blocks, step_size=1.0,
                      step_size_mode="explicit",
                      input_channels=feed.train.channels,
                      input_hw=feed.train.hw, num_classes=10)
    os.makedirs(args.out, exist_ok=True)

    rows = []
    for reset in (True, False):
        _, report = train(sched, feed, spec, OptimizerSettings(),
                          reset_lr=reset, seed=args.seed)
        err = report.final_test_error
        print(f"reset_lr={reset}: error={err:.4f} "
              f"wall={report.wall_seconds_total:.1f}s")
        rows.append((reset, err, report.wall_seconds_total))

    write_csv(os.path.join(args.out, "reset_lr_ablation.csv"),
              ["reset_lr", "test_error", "wall_seconds"], rows)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
