"""Command-line front end.

    vfl-lab <subcommand> [--config FILE] [--set section.key=value ...] [--seed N] [--force]

Subcommands: train, attack-eval, defend-eval, sweep, score-dump, grad-check.
Exit status: 0 success, 2 configuration error, 3 data error, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from typing import Sequence

import numpy as np

from vfl_lab.attacks import save_triggers
from vfl_lab.config import ExperimentConfig, config_digest, dumps_config, load_config
from vfl_lab.errors import ConfigurationError, DataError
from vfl_lab.experiment import (
    SweepGrid,
    artifact_digest,
    dump_scores,
    evaluate,
    fit_defense_stage,
    results_header,
    report_row,
    run_pipeline,
    sweep,
    train_stage,
)
from vfl_lab.nn_core import grad_check_suite
from vfl_lab.protocol import save_session
from vfl_lab.vflip import save_mae

EXIT_RUNTIME, EXIT_CONFIG, EXIT_DATA = 1, 2, 3
GRAD_TOL = 1e-4


class OverwriteError(ConfigurationError):
    pass


def _guard(path: str, digest: str, force: bool) -> None:
    """Refuse to replace an artifact produced by a different config."""
    if force or not os.path.exists(path):
        return
    existing = artifact_digest(path)
    if existing is not None and existing != digest:
        raise OverwriteError(f"{path} was written by config {existing[:12]}, not {digest[:12]}; use --force")


def _seeds(cfg: ExperimentConfig, args: argparse.Namespace) -> tuple[int, ...]:
    return (args.seed,) if args.seed is not None else cfg.eval.seeds


def _out(cfg: ExperimentConfig, name: str) -> str:
    out_dir = cfg.out_dir()
    os.makedirs(out_dir, exist_ok=True)
    return os.path.join(out_dir, name)


def _fmt(x: float) -> str:
    return "nan" if np.isnan(x) else f"{x:.4f}"


def _write_results(path: str, label: str, reports: list, cfg: ExperimentConfig) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# config_digest={config_digest(cfg)}\n")
        writer = csv.writer(fh)
        writer.writerow(results_header(cfg.vfl.n_participants))
        for r in reports:
            writer.writerow(report_row(label, float("nan"), r))


def cmd_train(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    digest = config_digest(cfg)
    for seed in _seeds(cfg, args):
        ckpt = _out(cfg, f"session_seed{seed}")
        _guard(os.path.join(ckpt, "manifest.txt"), digest, args.force)
        art = train_stage(cfg, seed)
        save_session(art.session, ckpt, digest)
        if art.attack is not None:
            save_triggers(art.attack, os.path.join(ckpt, "triggers.txt"), digest)
        last = art.stats[-1]
        print(f"seed {seed}: train loss {last.loss:.4f} acc {last.accuracy:.4f} -> {ckpt}")
    return 0


def _eval(cfg: ExperimentConfig, args: argparse.Namespace, name: str) -> int:
    digest = config_digest(cfg)
    path = _out(cfg, f"{name}.csv")
    _guard(path, digest, args.force)
    reports = []
    for seed in _seeds(cfg, args):
        report, art = run_pipeline(cfg, seed)
        reports.append(report)
        if art.mae is not None:
            mae_path = _out(cfg, f"mae_seed{seed}.txt")
            _guard(mae_path, digest, args.force)
            save_mae(art.mae, mae_path, art.thresholds, digest)
        print(f"seed {seed}: ACC {_fmt(report.acc)} ASR {_fmt(report.asr)}")
    _write_results(path, name, reports, cfg)
    print(f"results -> {path}")
    return 0


def cmd_attack_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    return _eval(cfg.replace("defense", mode="none"), args, "attack_eval")


def cmd_defend_eval(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    return _eval(cfg, args, "defend_eval")


def cmd_sweep(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    if not args.axis:
        raise ConfigurationError("sweep needs --axis")
    try:
        values = [float(v) for v in args.values.split(",") if v.strip()] if args.values else []
    except ValueError:
        raise ConfigurationError(f"--values must be comma-separated numbers, got {args.values!r}") from None
    grid = SweepGrid(args.axis, tuple(values), _seeds(cfg, args))
    path = _out(cfg, f"sweep_{args.axis}.csv")
    _guard(path, config_digest(cfg), args.force)
    rows = sweep(cfg, grid, path, workers=cfg.eval.workers)
    failed = sum(1 for r in rows if r["error"])
    print(f"{len(rows)} runs ({failed} failed) -> {path}")
    return 0


def cmd_score_dump(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    cfg = cfg.replace("defense", mode="vflip")
    digest = config_digest(cfg)
    for seed in _seeds(cfg, args):
        path = _out(cfg, f"scores_seed{seed}.csv")
        _guard(path, digest, args.force)
        art = train_stage(cfg, seed)
        fit_defense_stage(cfg, art, seed)
        evaluate(cfg, art, seed, digest)
        trig = art.trig_emb if art.trig_emb is not None else np.zeros((0, art.clean_emb.shape[1]))
        trig_labels = art.trig_labels if art.trig_labels is not None else np.zeros(0, dtype=np.int64)
        table = dump_scores(art.mae, art.thresholds, art.clean_emb, trig, path,
                            art.data.test.labels, trig_labels, digest)
        print(f"seed {seed}: {table.size} scores -> {path}")
    return 0


def cmd_grad_check(cfg: ExperimentConfig, args: argparse.Namespace) -> int:
    """Random small networks under both losses against central differences."""
    worst = grad_check_suite(args.networks, args.seed if args.seed is not None else 0)
    ok = worst < GRAD_TOL
    print(f"max relative error {worst:.3e} over {args.networks} networks x 2 losses: {'ok' if ok else 'FAIL'}")
    return 0 if ok else EXIT_RUNTIME


COMMANDS = {
    "train": cmd_train,
    "attack-eval": cmd_attack_eval,
    "defend-eval": cmd_defend_eval,
    "sweep": cmd_sweep,
    "score-dump": cmd_score_dump,
    "grad-check": cmd_grad_check,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfl-lab", description="Split-network VFL backdoor lab.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", help="INI config file (defaults describe the synthetic benchmark)")
    parser.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    parser.add_argument("--seed", type=int, help="run this single seed instead of eval.seeds")
    parser.add_argument("--force", action="store_true", help="overwrite artifacts from a different config")
    parser.add_argument("--axis", help="sweep axis: poisoning_budget, gamma, rho or eta")
    parser.add_argument("--values", help="comma-separated sweep values")
    parser.add_argument("--networks", type=int, default=20, help="grad-check: number of random networks")
    parser.add_argument("--show-config", action="store_true", help="print the resolved config first")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.config is not None and not os.path.isfile(args.config):
            raise ConfigurationError(f"config file {args.config} not found")
        cfg = load_config(args.config, args.overrides)
        if args.show_config:
            print(dumps_config(cfg))
        return COMMANDS[args.command](cfg, args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001 - top-level categorization
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
