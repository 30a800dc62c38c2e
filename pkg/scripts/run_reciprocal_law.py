"""Gamma vs depth: train the same task at three depths and fit gamma ~ 1/d.

Trains 2-2-2, 4-4-4, and 8-8-8 models independently, profiles the mean
residual-update norm gamma of each, and regresses gamma against the
reciprocal of the block count. If blocks act like Euler steps of a fixed
time horizon, gamma shrinks roughly as 1/d and the fit is tight.

Writes gamma_vs_depth.csv (depth, gamma, test_error, wall_seconds) and a
per-block norm profile per depth.
"""
import argparse
import os

import numpy as np

from odenet.data import AugmentConfig, DataFeed, balanced_subset, load_cifar10, synthesize
from odenet.csvio import write_csv
from odenet.lesion import profile_norms, write_norm_profile
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
    ap.add_argument("--out", default="runs/reciprocal")
    ap.add_argument("--data-dir", default="", help="CIFAR-format dir; synthetic if empty")
    ap.add_argument("--subset", type=int, default=5000)
    ap.add_argument("--hw", type=int, default=16, help="synthetic image size")
    ap.add_argument("--batch-size", type=int, default=100)
    ap.add_argument("--epochs", type=float, default=10.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true",
                    help="tiny subset and two epochs, for smoke testing")
    args = ap.parse_args()
    if args.quick:
        args.subset, args.epochs, args.hw = 1000, 2.0, 16

    feed = build_feed(args)
    total_steps = max(1, round(args.epochs * feed.steps_per_epoch))
    os.makedirs(args.out, exist_ok=True)

    rows = []
    gammas, depths = [], []
    for m in (2, 4, 8):
        blocks = (m, m, m)
        spec = ResNetSpec(blocks_per_stage=blocks, step_size=1.0,
                          step_size_mode="implicit",
                          input_channels=feed.train.channels,
                          input_hw=feed.train.hw, num_classes=10)
        sched = plan_schedule(blocks, 0, total_steps)
        model, report = train(sched, feed, spec, OptimizerSettings(),
                              seed=args.seed)
        prof = profile_norms(model, feed.eval_batches())
        err = report.cycles[-1].test_error
        print(f"d={prof.depth}: gamma={prof.gamma:.4f} test_error={err:.4f} "
              f"wall={report.wall_seconds_total:.1f}s")
        write_norm_profile(os.path.join(args.out, f"profile_d{prof.depth}.csv"), prof)
        rows.append((prof.depth, prof.gamma, err, report.wall_seconds_total))
        gammas.append(prof.gamma)
        depths.append(prof.depth)

    write_csv(os.path.join(args.out, "gamma_vs_depth.csv"),
              ["depth", "gamma", "test_error", "wall_seconds"], rows)

    x = 1.0 / np.array(depths)
    y = np.array(gammas)
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot
    print(f"fit gamma = {slope:.3f}/d + {intercept:.3f},  R^2 = {r2:.4f}")
    print(f"monotone decreasing: {all(a > b for a, b in zip(gammas, gammas[1:]))}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
