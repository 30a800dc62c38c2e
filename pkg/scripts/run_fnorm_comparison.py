"""Cross-depth F-norm curves: do nets at different step sizes share a flow?

Trains two explicit-mode models whose depths and step sizes are
reciprocal (m blocks per stage at h=1 versus 2m at h=1/2), samples
||F(Y_j)|| for every block against normalized stage time t = j/m, and
reports the correlation of the two curves. Writes fnorm_curves.csv for
offline plotting.
"""
import argparse
import os

from odenet.csvio import write_csv
from odenet.data import AugmentConfig, DataFeed, balanced_subset, load_cifar10, synthesize
from odenet.lesion import curve_correlation, f_norm_curves, write_fnorm_curves
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
    ap.add_argument("--out", default="runs/fnorm")
    ap.add_argument("--data-dir", default="")
    ap.add_argument("--subset", type=int, default=5000)
    ap.add_argument("--hw", type=int, default=16)
    ap.add_argument("--batch-size", type=int, default=100)
    ap.add_argument("--epochs", type=float, default=10.0)
    ap.add_argument("--blocks", type=int, default=5,
                    help="blocks per stage of the coarse model")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if args.quick:
        args.subset, args.epochs, args.blocks = 1000, 2.0, 2

    feed = build_feed(args)
    total_steps = max(1, round(args.epochs * feed.steps_per_epoch))
    os.makedirs(args.out, exist_ok=True)

    pairs = []
    for m, h in ((args.blocks, 1.0), (2 * args.blocks, 0.5)):
        blocks = (m, m, m)
        spec = ResNetSpec(blocks_per_stage=blocks, step_size=h,
                          step_size_mode="explicit",
                          input_channels=feed.train.channels,
                          input_hw=feed.train.hw, num_classes=10)
        sched = plan_schedule(blocks, 0, total_steps, h0=h)
        model, report = train(sched, feed, spec, OptimizerSettings(),
                              seed=args.seed)
        label = f"{3 * m}blocks_h{h:g}"
        print(f"{label}: error={report.final_test_error:.4f} "
              f"wall={report.wall_seconds_total:.1f}s")
        pairs.append((label, model))

    batches = feed.eval_batches()
    points = f_norm_curves(pairs, batches)
    write_fnorm_curves(os.path.join(args.out, "fnorm_curves.csv"), points)
    a = [p for p in points if p.model_id == pairs[0][0]]
    b = [p for p in points if p.model_id == pairs[1][0]]
    corr = curve_correlation(a, b)
    print(f"curve correlation (coarse vs fine): {corr:+.3f}")
    write_csv(os.path.join(args.out, "correlation.csv"),
              ["model_a", "model_b", "correlation"],
              [(pairs[0][0], pairs[1][0], corr)])
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
