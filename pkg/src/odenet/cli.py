"""Command line interface.

Subcommands: train, schedule, lesion, profile, sweep-lr, grad-check.
Exit codes: 0 success, 2 configuration problem, 3 data problem,
4 numeric divergence.

Heavy imports happen inside the handlers so the ODENET_THREADS
environment variable can cap the BLAS thread pool before numpy first
loads.
"""
from __future__ import annotations

import argparse
import os
import sys

from .errors import ConfigError, DataError, DivergenceError


def _configure_threads(argv) -> None:
    n = os.environ.get("ODENET_THREADS")
    if n is not None:
        if not n.isdigit() or int(n) < 1:
            raise ConfigError(f"ODENET_THREADS must be a positive integer, got {n!r}")
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = n
        return
    if os.environ.get("OPENBLAS_NUM_THREADS"):
        return
    if _peek_deterministic(argv):
        # Multi-threaded BLAS reductions are not associativity-safe, so a
        # deterministic run pins the pool to one thread.
        for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = "1"


def _peek_deterministic(argv) -> bool:
    """Read run.deterministic from the --config file, if any.

    Runs before numpy is imported, so it parses the TOML directly and
    swallows every error; the real config loader reports them later.
    """
    args = list(sys.argv[1:] if argv is None else argv)
    path = None
    override = None
    for i, a in enumerate(args):
        if a == "--config" and i + 1 < len(args):
            path = args[i + 1]
        elif a.startswith("--config="):
            path = a.split("=", 1)[1]
        elif a in ("-o", "--override") and i + 1 < len(args):
            if args[i + 1].startswith("run.deterministic="):
                override = args[i + 1].split("=", 1)[1]
        elif a.startswith("--override=run.deterministic="):
            override = a.split("=", 2)[2]
    if override is not None:
        return override.strip() == "true"
    if path is None:
        return True
    try:
        import tomllib
    except ModuleNotFoundError:  # python < 3.11
        import tomli as tomllib
    try:
        with open(path, "rb") as f:
            doc = tomllib.load(f)
        return bool(doc.get("run", {}).get("deterministic", True))
    except Exception:
        return True


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="odenet",
        description="Train and dissect residual networks viewed as ODE discretizations.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run a (multi-level) training schedule")
    t.add_argument("--config", required=True, help="TOML config file")
    t.add_argument("-o", "--override", action="append", default=[],
                   metavar="SECTION.KEY=VALUE", help="config override (repeatable)")
    t.add_argument("--baseline", choices=["none", "first_cycle", "last_cycle"],
                   default="none",
                   help="train a fixed-depth control instead of interpolating")

    s = sub.add_parser("schedule", help="print a cycle plan and theoretical savings")
    s.add_argument("--base-blocks", default="2,2,2", metavar="B,B,B")
    s.add_argument("--k", type=int, default=2, help="number of doublings")
    s.add_argument("--total-steps", type=int, default=60000)
    s.add_argument("--h0", type=float, default=1.0)

    l = sub.add_parser("lesion", help="block removal / shuffle experiments")
    l.add_argument("--checkpoint", required=True)
    l.add_argument("--config", required=True, help="config supplying the eval data")
    l.add_argument("--mode", choices=["remove", "shuffle", "sweep"], required=True)
    l.add_argument("--stage", type=int, default=0)
    l.add_argument("--index", type=int, default=1)
    l.add_argument("--seed", type=int, default=0, help="shuffle permutation seed")
    l.add_argument("--force", action="store_true")
    l.add_argument("--out", default="lesion_report.csv")
    l.add_argument("-o", "--override", action="append", default=[])

    pr = sub.add_parser("profile", help="per-block norm profile of a checkpoint")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", default="norm_profile.csv")
    pr.add_argument("-o", "--override", action="append", default=[])

    sw = sub.add_parser("sweep-lr", help="grid over cosine LR endpoints")
    sw.add_argument("--config", required=True)
    sw.add_argument("--eta-max", required=True, metavar="A,B,...")
    sw.add_argument("--eta-min", default=None, metavar="A,B,...")
    sw.add_argument("--out", default="lr_sweep.csv")
    sw.add_argument("-o", "--override", action="append", default=[])

    g = sub.add_parser("grad-check", help="finite-difference check of the autodiff engine")
    g.add_argument("--seeds", type=int, default=20)
    g.add_argument("--tolerance", type=float, default=1e-4)
    return p


def _load_feed_and_spec(cfg):
    """Build datasets, feed, and base architecture spec from a config."""
    import numpy as np

    from .config import DataSection
    from .data import (AugmentConfig, DataFeed, balanced_subset, load_cifar10,
                       load_mnist, synthesize)
    from .model import ResNetSpec

    d: DataSection = cfg.data
    if d.name == "synthetic":
        train, test = synthesize(d.synth_train, d.synth_test, hw=d.synth_hw,
                                 channels=d.synth_channels,
                                 num_classes=d.synth_classes, seed=d.synth_seed,
                                 noise=d.synth_noise)
    elif d.name == "cifar10":
        train, test = load_cifar10(d.dir)
    else:
        train, test = load_mnist(d.dir)
    if d.subset_size:
        train = balanced_subset(train, d.subset_size)
    if cfg.model.num_classes != train.num_classes:
        raise ConfigError(f"model.num_classes={cfg.model.num_classes} but the "
                          f"dataset has {train.num_classes} classes")
    aug = AugmentConfig(pad=d.pad, random_crop=d.random_crop, hflip=d.hflip,
                        standardize=d.standardize)
    feed = DataFeed(train, test, batch_size=d.batch_size, augment=aug,
                    seed=cfg.run.seed, prefetch=d.prefetch,
                    prefetch_capacity=d.prefetch_capacity)
    spec = ResNetSpec(
        blocks_per_stage=tuple(cfg.model.blocks_per_stage),
        base_filters=tuple(cfg.model.base_filters),
        width_multiplier=cfg.model.width_multiplier,
        step_size=cfg.model.step_size,
        step_size_mode=cfg.model.step_size_mode,
        input_channels=train.channels,
        input_hw=train.hw,
        num_classes=train.num_classes,
    )
    dtype = np.float32 if cfg.run.precision == "float32" else np.float64
    return feed, spec, dtype


def _build_schedule(cfg, feed):
    from .multilevel import plan_schedule

    s = cfg.schedule
    spe = feed.steps_per_epoch
    total_steps = max(1, round(s.total_epochs * spe))
    if s.split == "equal":
        split = "equal"
    else:
        bounds = s.boundaries
        if bounds is None:
            if s.k == 2:
                bounds = tuple(b * s.total_epochs / 160.0 for b in (60.0, 110.0))
            elif s.k == 0:
                bounds = ()
            else:
                raise ConfigError(
                    f"schedule.boundaries is required for explicit split with k={s.k}")
        marks = [0] + [round(b / s.total_epochs * total_steps) for b in bounds] \
            + [total_steps]
        split = [marks[i + 1] - marks[i] for i in range(len(marks) - 1)]
        if any(x < 1 for x in split):
            raise ConfigError(f"schedule boundaries {bounds} leave an empty cycle "
                              f"({total_steps} total steps)")
    h0 = cfg.model.step_size if cfg.model.step_size_mode == "explicit" else 1.0
    return plan_schedule(tuple(cfg.model.blocks_per_stage), s.k, total_steps,
                         split=split, h0=h0, eta_min=s.eta_min, eta_max=s.eta_max)


def _cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .config import config_hash, load_config, serialize_config
    from .multilevel import (OptimizerSettings, baseline_train, train,
                             write_summary, write_train_log)

    cfg = load_config(args.config, args.override)
    feed, spec, dtype = _load_feed_and_spec(cfg)
    schedule = _build_schedule(cfg, feed)
    opt = OptimizerSettings(momentum=cfg.optimizer.momentum,
                            weight_decay=cfg.optimizer.weight_decay,
                            reset_momentum=cfg.optimizer.reset_momentum)
    out_dir = cfg.run.output_dir
    os.makedirs(out_dir, exist_ok=True)
    chash = config_hash(cfg)
    with open(os.path.join(out_dir, "resolved_config.toml"), "w") as fh:
        fh.write(serialize_config(cfg))

    def on_cycle_end(ci, model):
        save_checkpoint(model, os.path.join(out_dir, f"ckpt_cycle{ci}"))

    kwargs = dict(opt=opt, reset_lr=cfg.schedule.reset_lr, seed=cfg.run.seed,
                  dtype=dtype, eval_each_cycle=cfg.run.eval_each_cycle,
                  on_cycle_end=on_cycle_end)
    if args.baseline == "none":
        model, report = train(schedule, feed, spec, **kwargs)
    else:
        model, report = baseline_train(args.baseline, schedule, feed, spec, **kwargs)

    write_train_log(os.path.join(out_dir, "train_log.csv"), report, chash)
    write_summary(os.path.join(out_dir, "summary.csv"), report, chash)
    for c in report.cycles:
        blocks = "-".join(str(b) for b in c.blocks_per_stage)
        err = "n/a" if c.test_error is None else f"{c.test_error:.4f}"
        print(f"cycle {c.cycle}: blocks {blocks} h={c.h:g} steps={c.steps} "
              f"wall={c.wall_seconds:.2f}s test_error={err}")
    print(f"total wall (train step time): {report.wall_seconds_total:.2f}s")
    print(f"artifacts in {out_dir} (config {chash})")
    return 0


def _cmd_schedule(args) -> int:
    from .multilevel import plan_schedule, theoretical_time_saved

    try:
        blocks = tuple(int(b) for b in args.base_blocks.split(","))
    except ValueError:
        raise ConfigError(f"cannot parse --base-blocks {args.base_blocks!r}")
    if args.k < 0:
        raise ConfigError(f"--k must be >= 0, got {args.k}")
    schedule = plan_schedule(blocks, args.k, args.total_steps, h0=args.h0)
    print("cycle  blocks       h        steps")
    for i, c in enumerate(schedule.cycles):
        b = "-".join(str(x) for x in c.blocks_per_stage)
        print(f"{i:5d}  {b:<11s} {c.h:<8g} {c.steps}")
    print()
    print("theoretical per-step work saved vs training the final depth throughout:")
    for k in range(6):
        print(f"  k={k}: {theoretical_time_saved(k):7.1%}")
    return 0


def _eval_batches_from_config(args):
    from .config import config_hash, load_config

    cfg = load_config(args.config, args.override)
    feed, _, _ = _load_feed_and_spec(cfg)
    return feed.eval_batches(), config_hash(cfg)


def _cmd_lesion(args) -> int:
    from .checkpoint import load_checkpoint
    from .lesion import (lesion_sweep, LesionRecord, LesionReport,
                         random_permutation_fixed_first, remove_block,
                         shuffle_blocks, write_lesion_report)
    from .model import evaluate

    model = load_checkpoint(args.checkpoint)
    batches, chash = _eval_batches_from_config(args)
    if args.mode == "sweep":
        report = lesion_sweep(model, batches)
    else:
        base = evaluate(model, batches)
        if args.mode == "remove":
            try:
                lesioned = remove_block(model, args.stage, args.index,
                                        force=args.force)
            except ValueError as e:
                raise ConfigError(str(e))
            label = f"remove stage{args.stage}.block{args.index}"
        else:
            m = len(model.stages[args.stage]) if 0 <= args.stage < 3 else 0
            if m == 0:
                raise ConfigError(f"stage {args.stage} out of range")
            perm = random_permutation_fixed_first(m, args.seed)
            try:
                lesioned = shuffle_blocks(model, args.stage, perm, force=args.force)
            except ValueError as e:
                raise ConfigError(str(e))
            label = f"shuffle stage{args.stage} seed{args.seed} perm=" \
                + "-".join(str(p) for p in perm)
        err = evaluate(lesioned, batches)
        report = LesionReport(baseline_error=base, records=[
            LesionRecord(intervention=label, error=err, delta=err - base)])
    write_lesion_report(args.out, report, chash)
    print(f"baseline error {report.baseline_error:.4f}")
    for r in report.records:
        print(f"{r.intervention}: error {r.error:.4f} (delta {r.delta:+.4f})")
    print(f"wrote {args.out}")
    return 0


def _cmd_profile(args) -> int:
    from .checkpoint import load_checkpoint
    from .lesion import profile_norms, write_norm_profile

    model = load_checkpoint(args.checkpoint)
    batches, chash = _eval_batches_from_config(args)
    profile = profile_norms(model, batches)
    write_norm_profile(args.out, profile, chash)
    print(f"depth {profile.depth}, mean update norm gamma = {profile.gamma:.6g}")
    print(f"wrote {args.out}")
    return 0


def _parse_float_list(text: str, flag: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v]
    except ValueError:
        raise ConfigError(f"cannot parse {flag} {text!r}")


def _cmd_sweep_lr(args) -> int:
    from .config import config_hash, load_config
    from .csvio import write_csv
    from .multilevel import OptimizerSettings, train

    cfg = load_config(args.config, args.override)
    maxes = _parse_float_list(args.eta_max, "--eta-max")
    mins = _parse_float_list(args.eta_min, "--eta-min") if args.eta_min \
        else [cfg.schedule.eta_min]
    if not maxes or not mins:
        raise ConfigError("empty learning-rate grid")
    feed, spec, dtype = _load_feed_and_spec(cfg)
    opt = OptimizerSettings(momentum=cfg.optimizer.momentum,
                            weight_decay=cfg.optimizer.weight_decay,
                            reset_momentum=cfg.optimizer.reset_momentum)
    rows = []
    for emin in mins:
        for emax in maxes:
            if not 0 < emin < emax:
                raise ConfigError(f"need 0 < eta_min < eta_max, got {emin}, {emax}")
            from dataclasses import replace
            grid_cfg = replace(cfg, schedule=replace(cfg.schedule, eta_min=emin,
                                                     eta_max=emax))
            schedule = _build_schedule(grid_cfg, feed)
            _, report = train(schedule, feed, spec, opt=opt,
                              reset_lr=cfg.schedule.reset_lr, seed=cfg.run.seed,
                              dtype=dtype, eval_each_cycle=True)
            err = report.final_test_error
            rows.append((emin, emax, 1.0 - err))
            print(f"eta_min={emin:g} eta_max={emax:g}: test_accuracy {1 - err:.4f}")
    write_csv(args.out, ["eta_min", "eta_max", "test_accuracy"], rows,
              comment=f"config_hash={config_hash(cfg)}")
    print(f"wrote {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    import numpy as np

    from .model import ResNetSpec, build_model, forward
    from .ops import softmax_cross_entropy
    from .optim import grad_check

    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    spec = ResNetSpec(blocks_per_stage=(1, 1, 1), base_filters=(2, 3, 4),
                      step_size=0.5, step_size_mode="explicit",
                      input_channels=3, input_hw=8, num_classes=3)
    worst = 0.0
    for seed in range(args.seeds):
        model = build_model(spec, seed=seed, dtype=np.float64)
        rng = np.random.default_rng(seed + 10_000)
        x = rng.standard_normal((2, 3, 8, 8))
        y = rng.integers(0, 3, size=2)

        def loss_fn(batch):
            logits, _ = forward(model, batch, mode="train")
            return softmax_cross_entropy(logits, y)

        report = grad_check(loss_fn, model.parameters(), x)
        flag = "ok" if report.max_rel_error < args.tolerance else "EXCEEDS"
        print(f"seed {seed}: max rel err {report.max_rel_error:.3e} "
              f"({report.worst_param}) {flag}")
        worst = max(worst, report.max_rel_error)
    status = "within" if worst < args.tolerance else "OUTSIDE"
    print(f"overall max rel err {worst:.3e} over {args.seeds} seeds, "
          f"{status} tolerance {args.tolerance:g}")
    return 0


_HANDLERS = {
    "train": _cmd_train,
    "schedule": _cmd_schedule,
    "lesion": _cmd_lesion,
    "profile": _cmd_profile,
    "sweep-lr": _cmd_sweep_lr,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    try:
        _configure_threads(argv)
        args = _build_parser().parse_args(argv)
        return _HANDLERS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
