"""Command-line entry point: ``slimssl {train,eval,sweep,lab,check-config}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradient_lab as lab
from .config import ExperimentConfig, load_config, save_config, to_dict
from .data import load_dataset
from .evaluation import width_sweep
from .objectives import ConfigError, check_guidelines
from .reporting import SWEEP_COLUMNS, load_checkpoint, write_csv, write_json, write_run
from .schedule import SamplingSchedule, assert_min_samples, expected_forward_count
from .trainer import DivergenceError, train

__all__ = ["build_parser", "main", "run_cli"]

log = logging.getLogger("slimssl")

DEFAULT_EVAL_WIDTHS = (0.25, 0.5, 0.75, 1.0)
STABILITY_WARNING = (
    "WARNING: stable=false. None of the three stability guidelines holds (relative-distance base loss, "
    "relative-distance distillation loss, momentum teacher); at least one is needed to avoid collapse."
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slimssl", description="Universally slimmable self-supervised learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, config_required=False):
        p.add_argument("--config", type=Path, required=config_required, help="JSON experiment config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", type=Path, help="output directory (default: config output_dir)")

    p = sub.add_parser("train", help="train a slimmable encoder")
    common(p)
    p.add_argument("--max-iterations", type=int, help="stop early after this many iterations")

    for name, help_ in (("eval", "linear-probe a checkpoint at given widths"),
                        ("sweep", "linear-probe a checkpoint at every grid width")):
        p = sub.add_parser(name, help=help_)
        common(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--width", type=float, action="append", help="width to evaluate (repeatable)")

    p = sub.add_parser("lab", help="numerical checks: 1 rotation stability, 2 closed-form gradients, 3 EMA drift")
    common(p)
    p.add_argument("--lemma", type=int, choices=(1, 2, 3), required=True)
    p.add_argument("--trials", type=int, default=1000)

    p = sub.add_parser("check-config", help="validate a config and report stability guidelines")
    common(p)
    return parser


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.train.seed = args.seed
        cfg.train.data = dataclasses.replace(cfg.train.data, seed=args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    out = Path(args.out) if args.out else Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    save_config(cfg, out / "config.json")
    data = load_dataset(cfg.train.data)
    try:
        art = train(cfg.train, data[0], max_iterations=args.max_iterations)
    except DivergenceError as exc:
        write_run(exc.artifacts, out)
        print(f"error: {exc}", file=sys.stderr)
        return 1
    paths = write_run(art, out)
    print(json.dumps({**art.summary(), **{k: str(v) for k, v in paths.items()}}, indent=2))
    return 0


def _sweep(args, widths) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    enc = load_checkpoint(args.checkpoint)
    Xtr, ytr, Xte, yte = load_dataset(cfg.train.data)
    if len(Xte) == 0:
        raise ConfigError("evaluation needs a test split (data.n_test or data.test_path)")
    sched = cfg.train.schedule
    rows = width_sweep(
        enc, widths, (Xtr.reshape(len(Xtr), -1), ytr), (Xte.reshape(len(Xte), -1), yte),
        width_range=(sched.r_min, sched.r_max),
    )
    name = "sweep.csv" if args.command == "sweep" else "eval.csv"
    write_csv(out / name, rows, SWEEP_COLUMNS)
    for r in rows:
        print(f"{r['width']:.2f}\t{r['params_active']}\t{r['accuracy']:.4f}")
    return 0


def cmd_eval(args) -> int:
    return _sweep(args, args.width or DEFAULT_EVAL_WIDTHS)


def cmd_sweep(args) -> int:
    if args.width:
        return _sweep(args, args.width)
    cfg = _load(args)
    return _sweep(args, [float(w) for w in cfg.train.schedule.width_grid])


def cmd_lab(args) -> int:
    cfg = _load(args)
    out = _out_dir(args, cfg)
    seed = cfg.train.seed
    if args.lemma == 1:
        report = lab.stability_compare(trials=args.trials, rng=seed)
        rows = report.rows
        columns = ("trial", "loss_kind", "gap_norm", "P_i")
        verdict = {**report.summary(), "holds": report.nce_win_fraction >= 0.99}
    elif args.lemma == 2:
        rows = lab.gradient_agreement(args.trials, rng=seed)
        columns = ("instance", "loss_kind", "rel_err")
        worst = {k: max(r["rel_err"] for r in rows if r["loss_kind"] == k) for k in ("MSE", "NCE", "CE")}
        verdict = {"instances": args.trials, "max_rel_err": worst, "holds": max(worst.values()) <= 1e-8}
    else:
        stream = lab.random_update_stream(500, 64, rng=seed)
        drifts = lab.ema_consistency_probe([0.0, 0.5, 0.9, 0.99], stream)
        rows = [{"step": k + 1, **{f"m={m:g}": float(d[k]) for m, d in drifts.items()}} for k in range(500)]
        columns = tuple(rows[0])
        verdict = {
            "steps": 500,
            "mean_drift": {f"{m:g}": float(d.mean()) for m, d in drifts.items()},
            "holds": bool(np.all(drifts[0.99] <= drifts[0.5])),
        }
    write_csv(out / f"lemma{args.lemma}.csv", rows, columns)
    write_json(out / f"lemma{args.lemma}_verdict.json", verdict)
    print(json.dumps(verdict, indent=2))
    return 0


def cmd_check_config(args) -> int:
    cfg = _load(args)
    t = cfg.train
    report = check_guidelines(t.loss)
    assert_min_samples(t.schedule)
    doc = {
        "config": to_dict(cfg),
        "guidelines": report.to_dict(),
        "expected_forward_count": expected_forward_count(t.schedule),
        "warning": not report.stable,
    }
    print(json.dumps(doc, indent=2))
    if not report.stable:
        print(STABILITY_WARNING, file=sys.stderr)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "lab": cmd_lab,
    "check-config": cmd_check_config,
}


def run_cli(argv: Sequence[str] | None = None) -> int:
    """Run one subcommand; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run_cli())
