"""Command-line entry point: ``multiexit <command> [options]``.

Every command writes its outputs into a run directory and refreshes that
directory's ``manifest.json``. Commands that need a trained model read
``config.txt`` and ``model.ckpt`` from ``--run``.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

from .config import RunConfig, load_config, parse_config_text
from .data import make_dataset
from .errors import ConfigError, InfeasibleBudgetError, TrainingDivergedError
from .experiments import (
    ensure_dir,
    new_model,
    run_ablation,
    summarize_ablation,
    train_run,
    write_ablation_csv,
    write_manifest,
)
from .inference import anytime_eval, budgeted_batch_eval, calibrate_thresholds
from .network import count_macs, load_checkpoint, save_checkpoint
from .training import measure_grad_variance

CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "model.ckpt"


class UsageError(Exception):
    pass


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _config_from_args(args) -> RunConfig:
    if args.config is not None and not Path(args.config).is_file():
        raise UsageError(f"config file not found: {args.config}")
    return load_config(args.config, _overrides(args.set))


def _load_run(args):
    run = Path(args.run)
    cfg_path, ckpt_path = run / CONFIG_FILE, run / CHECKPOINT_FILE
    if not cfg_path.is_file() or not ckpt_path.is_file():
        raise UsageError(f"{run} is not a trained run directory (need {CONFIG_FILE} and {CHECKPOINT_FILE})")
    pairs = parse_config_text(cfg_path.read_text())
    pairs.update(_overrides(args.set))
    cfg = RunConfig().with_overrides(pairs)
    return run, cfg, make_dataset(cfg.data), load_checkpoint(ckpt_path)


def _finish(run: Path, cfg: RunConfig, data) -> None:
    artifacts = sorted(p.name for p in run.iterdir() if p.is_file() and p.name != "manifest.json")
    ckpt = CHECKPOINT_FILE if (run / CHECKPOINT_FILE).exists() else None
    write_manifest(run, cfg, data, artifacts, checkpoint=ckpt)


def _parse_budgets(text: str) -> list[float]:
    try:
        budgets = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--budgets must be comma-separated numbers, got {text!r}") from None
    if not budgets:
        raise UsageError("--budgets is empty")
    if budgets != sorted(budgets):
        raise UsageError("--budgets must be ascending")
    return budgets


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    run = ensure_dir(args.out)
    model, log, data = train_run(cfg)
    (run / CONFIG_FILE).write_text(cfg.to_text())
    save_checkpoint(model, run / CHECKPOINT_FILE)
    log.write_csv(run / "train_log.csv")
    _finish(run, cfg, data)
    acc = log.final_accuracy("val")
    print("val accuracy per exit: " + " ".join(f"{a:.4f}" for a in acc))
    return 0


def cmd_eval_anytime(args) -> int:
    run, cfg, data, model = _load_run(args)
    acc = anytime_eval(model, data.x_test, data.y_test)
    costs = count_macs(model.cfg)
    with open(run / "anytime.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["exit", "cost", "accuracy"])
        for i, (c, a) in enumerate(zip(costs, acc), start=1):
            w.writerow([i, c, repr(a)])
    _finish(run, cfg, data)
    for i, a in enumerate(acc, start=1):
        print(f"exit {i}: {a:.4f}")
    return 0


def cmd_calibrate(args) -> int:
    run, cfg, data, model = _load_run(args)
    sched = calibrate_thresholds(model, data.x_val, args.budget)
    with open(run / "thresholds.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["exit", "threshold", "q", "budget"])
        for i, t in enumerate(sched.thresholds, start=1):
            w.writerow([i, repr(t), repr(sched.q), repr(sched.budget)])
    _finish(run, cfg, data)
    print(f"q={sched.q:.6f} thresholds=" + ",".join(f"{t:.6f}" for t in sched.thresholds))
    return 0


def cmd_eval_budget(args) -> int:
    budgets = _parse_budgets(args.budgets)
    run, cfg, data, model = _load_run(args)
    c1 = count_macs(model.cfg)[0]
    if budgets[0] < c1:
        print(f"warning: budgets below the exit-1 cost {c1} are evaluated as all-exit-1",
              file=sys.stderr)
    report = budgeted_batch_eval(model, data.x_test, data.y_test, budgets, data.x_val,
                                 clamp_infeasible=True)
    report.write_csv(run / "budget.csv")
    report.write_curve(run / "budget_curve.txt")
    _finish(run, cfg, data)
    for p in report.points:
        print(f"budget {p.budget:g}: avg_cost {p.avg_cost:.1f} accuracy {p.accuracy:.4f}")
    return 0


def cmd_grad_variance(args) -> int:
    if args.run:
        run, cfg, data, model = _load_run(args)
    else:
        cfg = _config_from_args(args)
        run = ensure_dir(args.out)
        data = make_dataset(cfg.data)
        model = new_model(cfg, data)
        (run / CONFIG_FILE).write_text(cfg.to_text())
    report = measure_grad_variance(model, data, cfg.train, n_steps=args.steps, seed=cfg.train.seed)
    report.write_csv(run / "grad_variance.csv")
    _finish(run, cfg, data)
    for b in report.blocks:
        print(f"block {b.block}: plain {b.var_plain:.3e} ge {b.var_ge:.3e} bound {b.bound:.3e}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    run = ensure_dir(args.out)
    data = make_dataset(cfg.data)
    seeds = range(args.seed0, args.seed0 + args.seeds)

    def progress(r):
        print(f"seed {r.seed} ge={int(r.ge)} isc={int(r.isc)} ofa={int(r.ofa)} "
              f"mean acc {r.mean_accuracy:.4f}", flush=True)

    rows = run_ablation(cfg, seeds, data, progress=None if args.quiet else progress)
    (run / CONFIG_FILE).write_text(cfg.to_text())
    write_ablation_csv(summarize_ablation(rows), run / "ablation.csv")
    _write_seed_rows(rows, run / "ablation_seeds.csv")
    _finish(run, cfg, data)
    return 0


def _write_seed_rows(rows, path) -> None:
    k = len(rows[0].exit_accuracy)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["seed", "ge", "isc", "ofa"] + [f"acc_exit_{i}" for i in range(1, k + 1)]
                   + ["mean_accuracy", "grad_var_block1"])
        for r in rows:
            w.writerow([r.seed, int(r.ge), int(r.isc), int(r.ofa)] + [repr(a) for a in r.exit_accuracy]
                       + [repr(r.mean_accuracy), repr(r.grad_var_block1)])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multiexit", description="Multi-exit network training and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def fresh(p, out_default):
        p.add_argument("--config", help="key=value config file (defaults apply when omitted)")
        p.add_argument("--out", default=out_default, help="run directory to write")

    def existing(p):
        p.add_argument("--run", required=True, help="run directory produced by 'train'")

    p = sub.add_parser("train", help="phase 1 + phase 2 training")
    fresh(p, "run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval-anytime", help="accuracy of every exit on the test split")
    existing(p)
    p.set_defaults(func=cmd_eval_anytime)

    p = sub.add_parser("calibrate", help="thresholds for one average-cost budget")
    existing(p)
    p.add_argument("--budget", type=float, required=True, help="average MACs per sample")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("eval-budget", help="budgeted batch classification over several budgets")
    existing(p)
    p.add_argument("--budgets", required=True, help="ascending comma-separated MAC budgets")
    p.set_defaults(func=cmd_eval_budget)

    p = sub.add_parser("grad-variance", help="block gradient variance, plain vs equilibrium")
    p.add_argument("--run", help="measure at a trained checkpoint instead of at initialization")
    fresh(p, "run-gradvar")
    p.add_argument("--steps", type=int, default=100)
    p.set_defaults(func=cmd_grad_variance)

    p = sub.add_parser("ablate", help="GE x ISC x OFA grid over several seeds")
    fresh(p, "run-ablation")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_ablate)

    for action in sub.choices.values():
        action.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                            help="override one config key, repeatable")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        parser.error(str(e))
    except (InfeasibleBudgetError, TrainingDivergedError, OSError, ValueError) as e:
        print(f"multiexit: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
