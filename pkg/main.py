"""
main.py

Command-line entry point for gridssl.

    train   -> run directory with checkpoints and a metrics log
    eval    -> ratemaps, images and report.json for each arena
    ablate  -> one trained and evaluated run per ablation
    oracle  -> ratemaps and coding diagnostics of the planted ideal code
    report  -> summary tables for an existing run directory
"""

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from rich.table import Table

from checkpoint import read_checkpoint
from config import ABLATIONS, RunConfig, apply_ablation, parse_ablation_list, worker_cap
from errors import ConfigError, GridSSLError, NumericAbort, StorageError
from evaluation import (
    ArenaReport,
    ModelSource,
    OracleSource,
    arena_generalisation,
    batch_distance_cdf,
    commutation_report,
    compare_to_oracle,
    evaluate,
    oracle_ratemaps,
    sample_velocity_pairs,
    trajectory_statistics,
)
from gridcode import coding_diagnostics, default_code
from logs import banner, console, setup_logging
from model import rollout
from optimizer import CLIP_MODES
from ratemaps import read_ratemap, write_montage, write_pgm, write_ratemap
from storage import RunDirectory, read_json, write_json
from trainer import batch_rng, make_batch, run_training
from trajectory import sample_eval_trajectory, square_arena

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "default.cfg"


def parse_arenas(text: Optional[str]) -> Optional[List[float]]:
    if text is None:
        return None
    try:
        arenas = [float(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise ConfigError(f"cannot parse arena list: {text!r}") from None
    if not arenas or any(a <= 0 for a in arenas):
        raise ConfigError(f"arena list must hold positive sides, got {text!r}")
    return arenas


def load_config(args: argparse.Namespace, path: Optional[Path] = None, require: bool = True) -> RunConfig:
    """Config file plus the command-line overrides present on `args`."""
    path = path or Path(args.config)
    config = RunConfig.from_file(path, require=require)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "max_steps", None) is not None:
        overrides["max_steps"] = args.max_steps
    if getattr(args, "raw_sums", False):
        overrides["raw_sums"] = True
    if getattr(args, "clip_mode", None) is not None:
        overrides["clip_mode"] = args.clip_mode
    return config.with_overrides(**overrides) if overrides else config


def _key_value_table(title: str, rows: Sequence) -> Table:
    table = Table(title=title, show_header=False)
    table.add_column("key", style="bold")
    table.add_column("value")
    for key, value in rows:
        table.add_row(str(key), str(value))
    return table


def _arena_table(reports: Sequence[ArenaReport]) -> Table:
    table = Table(title="Evaluation")
    for column in ("arena", "live", "classified", "modules", "median period", "rings", "notes"):
        table.add_column(column)
    for r in reports:
        live = sum(not m.dead for m in r.ratemaps)
        classified = sum(s.classified for s in r.summaries)
        periods = r.periods()
        table.add_row(
            f"{r.arena:g} m",
            str(live),
            str(classified),
            str(r.modules.n_modules) if r.modules else "-",
            f"{np.median(periods):.3f} m" if periods.size else "-",
            ", ".join(f"{k}:{v.n_rings}/3" for k, v in r.torus.items()) or "-",
            "; ".join(r.errors),
        )
    return table


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args)
    banner("gridssl train")
    if args.resume:
        run_dir = RunDirectory(Path(args.run_dir) if args.run_dir else Path(args.resume).resolve().parent.parent)
    else:
        label = None if config.ablation == "none" else config.ablation
        run_dir = RunDirectory.create(config.train.seed, label=label)
    result = run_training(config, run_dir, resume=args.resume, prefetch=not args.no_prefetch)
    rows = [
        ("run directory", run_dir.path),
        ("steps", result.steps),
        ("final checkpoint", result.final_checkpoint),
        ("learning rate", f"{result.lr:.3g}"),
    ]
    if result.last is not None:
        rows.append(("total loss", f"{result.last.total:.6f}"))
    console.print(_key_value_table("Training", rows))
    return 0


def evaluate_checkpoint(
    checkpoint: Path,
    config: RunConfig,
    run_dir: RunDirectory,
    arenas: Optional[Sequence[float]] = None,
    commutation_pairs: int = 256,
) -> Dict:
    """Full analysis of one checkpoint; the report is written to the run directory."""
    params = read_checkpoint(checkpoint, dtype=config.train.dtype, train_g0=config.model.train_g0)
    seed = config.train.seed
    reports = evaluate(ModelSource(params), config.eval, seed, run_dir.eval_root, arenas)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 1_000_003]))
    batch = make_batch(config, batch_rng(seed, 0))
    states = rollout(params, batch.velocities[0])
    pairs = sample_velocity_pairs(commutation_pairs, rng, config.data.velocity_range)
    document = {
        "source": str(checkpoint),
        "config": config.to_dict(),
        "arenas": [r.to_dict() for r in reports],
        "generalisation": arena_generalisation(reports),
        "commutation": commutation_report(params, pairs, states).to_dict(),
        "training_batch_distances": batch_distance_cdf(batch),
    }
    write_json(run_dir.report_path, document)
    console.print(_arena_table(reports))
    return document


def evaluate_oracle(config: RunConfig, run_dir: RunDirectory, arenas: Optional[Sequence[float]] = None) -> Dict:
    code = default_code()
    reports = evaluate(OracleSource(code), config.eval, config.train.seed, run_dir.eval_root, arenas)
    document = {
        "source": "oracle",
        "arenas": [r.to_dict() for r in reports],
        "generalisation": arena_generalisation(reports),
        "oracle": [compare_to_oracle(r, code) for r in reports],
    }
    write_json(run_dir.report_path, document)
    console.print(_arena_table(reports))
    return document


def cmd_eval(args: argparse.Namespace) -> int:
    banner("gridssl eval")
    arenas = parse_arenas(args.arenas)
    if args.oracle:
        config = load_config(args, require=False) if args.config else RunConfig()
        if args.seed is not None:
            config = config.with_overrides(seed=args.seed)
        run_dir = RunDirectory.create(config.train.seed, label="oracle-eval")
        evaluate_oracle(config, run_dir, arenas)
        return 0
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint or --oracle")
    checkpoint = Path(args.checkpoint)
    if checkpoint.is_dir():
        run_dir = RunDirectory(checkpoint)
        checkpoint = run_dir.latest_checkpoint()
        if checkpoint is None:
            raise ConfigError(f"no checkpoints in run directory {run_dir.path}")
    else:
        run_dir = RunDirectory(checkpoint.resolve().parent.parent)
    config_path = Path(args.config) if args.config else run_dir.config_path
    config = load_config(args, path=config_path, require=False)
    evaluate_checkpoint(checkpoint, config, run_dir, arenas)
    logger.info("Report written to %s", run_dir.report_path)
    return 0


def run_ablation(config: RunConfig) -> Dict:
    """Train and evaluate one ablated configuration; runs inside a worker process when parallel."""
    setup_logging()
    run_dir = RunDirectory.create(config.train.seed, label=config.ablation)
    summary = {"ablation": config.ablation, "run_dir": str(run_dir.path)}
    try:
        result = run_training(config, run_dir)
    except NumericAbort as e:
        logger.error("Ablation %s aborted: %s", config.ablation, e)
        summary.update(status="aborted", step=e.step)
        return summary
    document = evaluate_checkpoint(result.final_checkpoint, config, run_dir, config.eval.eval_arenas[:1])
    first = document["arenas"][0]
    summary.update(
        status="ok",
        steps=result.steps,
        total=result.last.total if result.last else None,
        n_modules=first["modules"]["n_modules"] if first["modules"] else 0,
    )
    return summary


def cmd_ablate(args: argparse.Namespace) -> int:
    base = load_config(args)
    names = parse_ablation_list(args.only)
    configs = [apply_ablation(base, name) for name in names]
    banner(f"gridssl ablate ({len(configs)} runs)")
    workers = min(args.parallel, worker_cap(), len(configs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(run_ablation, configs))
    else:
        summaries = [run_ablation(c) for c in configs]

    table = Table(title="Ablations")
    for column in ("ablation", "description", "status", "modules", "run directory"):
        table.add_column(column)
    for s in summaries:
        table.add_row(s["ablation"], ABLATIONS[s["ablation"]], s["status"], str(s.get("n_modules", "-")), s["run_dir"])
    console.print(table)
    return 0 if all(s["status"] == "ok" for s in summaries) else NumericAbort.exit_code


def cmd_oracle(args: argparse.Namespace) -> int:
    banner("gridssl oracle")
    code = default_code()
    run_dir = RunDirectory.create(args.seed or 0, label="oracle")
    out_dir = run_dir.path / "oracle"
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise StorageError(f"cannot create output directory {out_dir}: {e}") from e
    ratemaps = oracle_ratemaps(code, args.arena, args.bin_size)
    for ratemap in ratemaps:
        write_ratemap(out_dir / f"unit_{ratemap.unit:03d}.gsrm", ratemap)
        write_pgm(out_dir / "images" / f"unit_{ratemap.unit:03d}.pgm", ratemap.values)
    write_montage(out_dir / "montage.ppm", ratemaps)

    rng = np.random.default_rng(args.seed or 0)
    report = coding_diagnostics(code, args.arena, args.resolution, rng=rng)
    write_json(run_dir.report_path, {
        "modules": [{"period": m.period, "orientation_deg": float(np.rad2deg(m.orientation)), "cells": m.n_cells}
                    for m in code.modules],
        "coding": report.to_dict(),
    })
    rows = [(f"{m + 1} module(s)", count) for m, count in enumerate(report.distinguishable)]
    rows += [("threshold", f"{report.threshold:.4f}"), ("norm range", f"{report.min_norm:.3f} .. {report.max_norm:.3f}")]
    console.print(_key_value_table("Distinguishable coding states", rows))
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = RunDirectory(args.run)
    if not run_dir.path.is_dir():
        raise ConfigError(f"run directory not found: {run_dir.path}")
    banner(f"gridssl report {run_dir.path.name}")

    config = RunConfig.from_file(run_dir.config_path, require=False) if run_dir.config_path.is_file() else RunConfig()
    metrics = run_dir.metrics.load_all()
    if metrics:
        rows = [("rows", len(metrics)), ("first total", f"{metrics[0]['total']:.6f}"),
                ("last total", f"{metrics[-1]['total']:.6f}"), ("last lr", f"{metrics[-1]['lr']:.3g}")]
        console.print(_key_value_table("Training", rows))

    seed = config.train.seed
    batch = make_batch(config, batch_rng(seed, 0))
    walk = sample_eval_trajectory(
        square_arena(config.eval.eval_arenas[0]), config.eval.eval_smoothness, args.walk_steps,
        np.random.default_rng(seed), config.eval.eval_speed,
    )
    write_json(run_dir.path / "trajectory_stats.json", {
        "training": trajectory_statistics(batch.velocities),
        "evaluation": trajectory_statistics(walk.velocities),
    })

    for arena_dir in sorted(run_dir.eval_root.glob("arena_*")):
        maps = [read_ratemap(p) for p in sorted((arena_dir / "ratemaps").glob("unit_*.gsrm"))]
        if maps:
            write_montage(arena_dir / "montage.ppm", maps)
            logger.info("Re-rendered %s (%d units)", arena_dir / "montage.ppm", len(maps))

    if run_dir.report_path.is_file():
        document = read_json(run_dir.report_path)
        table = Table(title="Modules")
        for column in ("arena", "module", "units", "period (m)", "orientation (deg)", "phases uniform"):
            table.add_column(column)
        for arena in document.get("arenas", []):
            for m in (arena.get("modules") or {}).get("modules", []):
                table.add_row(
                    f"{arena['arena']:g} m", str(m["module"]), str(m["size"]), f"{m['mean_period']:.3f}",
                    f"{m['mean_orientation_deg']:.1f}", str(m["phases_uniform"]),
                )
        console.print(table)
        if "commutation" in document:
            c = document["commutation"]
            console.print(_key_value_table("Commutation", [("mean", c["mean"]), ("max", c["max"])]))
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridssl", description="Self-supervised grid cell toolkit")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING (default: GRIDSSL_LOG_LEVEL or INFO)")
    commands = parser.add_subparsers(dest="command", required=True)

    def training_options(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=DEFAULT_CONFIG, help="flat key = value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--max-steps", type=int, default=None)
        p.add_argument("--raw-sums", action="store_true", help="unnormalised separation and invariance sums")
        p.add_argument("--clip-mode", choices=CLIP_MODES, default=None)

    train = commands.add_parser("train", help="train a network")
    training_options(train)
    train.add_argument("--resume", default=None, help="checkpoint to continue from")
    train.add_argument("--run-dir", default=None, help="run directory when resuming (default: the checkpoint's)")
    train.add_argument("--no-prefetch", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = commands.add_parser("eval", help="analyse a checkpoint or the ideal code")
    ev.add_argument("--checkpoint", default=None, help="checkpoint file, or a run directory for its latest checkpoint")
    ev.add_argument("--oracle", action="store_true", help="evaluate the planted ideal code")
    ev.add_argument("--config", default=None, help="defaults to the run's config.cfg")
    ev.add_argument("--arenas", default=None, help="comma-separated arena sides in meters")
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_eval)

    ablate = commands.add_parser("ablate", help="train and evaluate the ablation matrix")
    training_options(ablate)
    ablate.add_argument("--only", default=None, help=f"comma-separated subset of: {', '.join(ABLATIONS)}")
    ablate.add_argument("--parallel", type=int, default=1, help="concurrent runs (capped by GRIDSSL_THREADS)")
    ablate.set_defaults(func=cmd_ablate)

    oracle = commands.add_parser("oracle", help="write the ideal code's ratemaps and coding diagnostics")
    oracle.add_argument("--arena", type=float, default=2.0)
    oracle.add_argument("--bin-size", type=float, default=None)
    oracle.add_argument("--resolution", type=float, default=0.05)
    oracle.add_argument("--seed", type=int, default=None)
    oracle.set_defaults(func=cmd_oracle)

    report = commands.add_parser("report", help="summarise an existing run directory")
    report.add_argument("run", help="run directory")
    report.add_argument("--walk-steps", type=int, default=20_000)
    report.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Parse arguments, run one command and map failures to exit codes."""
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.func(args)
    except GridSSLError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130


if __name__ == "__main__":
    sys.exit(main())
