"""Command-line interface.

Subcommands: ``train`` (run training, write metrics/curves/checkpoint),
``eval`` (frozen-parameter rollouts from a checkpoint), ``ablate`` (the
propagation-mode x tier grid plus component knock-outs), ``dump-confusion``
(export the confusion ledger as CSV), and ``replay`` (re-derive metrics
from a run log and report discrepancies).

Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 config error.
The ``REMALIS_LOG`` environment variable sets the log level.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigFileError, load_config
from .envs import make_env
from .harness import (
    MetricsRow,
    eval_rows,
    replay_log,
    run_ablation,
    run_knockouts,
    summarize,
    write_metrics,
    write_summary,
    write_trace_log,
)
from .trainer import (
    LOSS_KEYS,
    RunConfig,
    build_team,
    checkpoint,
    evaluate,
    restore,
    run_training,
)

log = logging.getLogger("remalis")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3


def _setup_logging() -> None:
    level = os.environ.get("REMALIS_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=str, default=None, help="config file path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--mode", choices=["none", "basic", "selective", "full"], default=None)
    p.add_argument("--tier", choices=["easy", "medium", "hard", "hell", "all"], default=None)
    p.add_argument("--env", choices=["traffic", "web"], default=None, dest="env_kind")
    p.add_argument("--out", type=str, default="runs")
    p.add_argument("--dump-confusion", action="store_true",
                   help="export the confusion ledger CSV at the end")


def _build_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "episodes": args.episodes,
                 "channel_mode": args.mode, "tier": args.tier,
                 "env_kind": getattr(args, "env_kind", None)}
    if args.config:
        return load_config(args.config, overrides)
    return dataclasses.replace(RunConfig(),
                               **{k: v for k, v in overrides.items() if v is not None})


def _dump_confusion(team, out_dir: Path) -> Path:
    path = out_dir / "confusion.csv"
    names = team.info.concept_names
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["concept"] + list(names))
        for i, name in enumerate(names):
            writer.writerow([name] + [f"{v:.10g}" for v in team.ledger.C[i]])
    log.info("confusion ledger -> %s", path)
    return path


def _write_curves(metrics, out_dir: Path) -> Path:
    path = out_dir / "training_curve.csv"
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tick", "episode"] + list(LOSS_KEYS)
                        + ["return", "E", "U", "replans", "alignment"])
        tick_total = 0
        for m in metrics:
            tick_total += m.tick_count
            writer.writerow([tick_total, m.episode]
                            + [f"{m.losses.get(k, 0.0):.10g}" for k in LOSS_KEYS]
                            + [f"{m.episode_return:.10g}", m.e_sum,
                               f"{m.u_mean:.10g}", m.replans,
                               f"{m.mean_alignment:.10g}"])
    return path


def cmd_train(args) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log.info("training: env=%s tier=%s mode=%s episodes=%d seed=%d",
             config.env_kind, config.tier, config.channel_mode,
             config.episodes, config.seed)
    team, metrics, _ = run_training(config)
    _write_curves(metrics, out)
    ckpt = out / "checkpoint.rmls"
    checkpoint(team, ckpt)
    rows, traces = eval_rows(f"{config.tier}/{config.channel_mode}", config.seed,
                             team, config, eval_episodes=10, wall_clock=0.0)
    write_metrics(rows, out)
    write_trace_log(traces, config, out / "trace.jsonl", final_memory=team.ledger.M)
    if args.dump_confusion:
        _dump_confusion(team, out)
    log.info("checkpoint -> %s", ckpt)
    return EXIT_OK


def cmd_eval(args) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    team, _env = build_team(config)
    restore(team, args.checkpoint)
    rows, traces = eval_rows(f"{config.tier}/{config.channel_mode}", config.seed,
                             team, config, eval_episodes=args.eval_episodes,
                             wall_clock=0.0)
    write_metrics(rows, out)
    write_trace_log(traces, config, out / "trace.jsonl", final_memory=team.ledger.M)
    if args.dump_confusion:
        _dump_confusion(team, out)
    summary = summarize(rows, horizon=config.ticks)
    write_summary(summary, out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    config = _build_config(args)
    tiers = args.tiers.split(",")
    modes = args.modes.split(",")
    seeds = list(range(args.seeds))
    out = Path(args.out)

    def progress(cell, cell_rows):
        mean_a = float(np.mean([r.alignment for r in cell_rows]))
        log.info("cell %-18s mean alignment %.3f (%d rows)", cell, mean_a, len(cell_rows))

    rows = run_ablation(config, tiers, modes, seeds,
                        eval_episodes=args.eval_episodes, progress=progress)
    if args.knockouts:
        rows += run_knockouts(config, seeds, eval_episodes=args.eval_episodes,
                              progress=progress)
    write_metrics(rows, out)
    summary = summarize(rows, horizon=config.ticks)
    write_summary(summary, out)
    log.info("metrics -> %s", out)
    return EXIT_OK


def cmd_dump_confusion(args) -> int:
    config = _build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    team, env = build_team(config)
    if args.checkpoint:
        restore(team, args.checkpoint)
    evaluate(team, env, config, episodes=args.eval_episodes)
    _dump_confusion(team, out)
    return EXIT_OK


def cmd_replay(args) -> int:
    problems = replay_log(args.log)
    if problems:
        for p in problems:
            log.error("discrepancy: %s", p)
        print(f"{len(problems)} discrepancies found")
        return EXIT_RUNTIME
    print("0 discrepancies found")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="remalis",
                                     description="cooperative intention-sharing engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a team and checkpoint it")
    _common_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="frozen-parameter rollouts from a checkpoint")
    _common_flags(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.add_argument("--eval-episodes", type=int, default=20)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="propagation-mode x tier grid")
    _common_flags(p)
    p.add_argument("--tiers", type=str, default="easy")
    p.add_argument("--modes", type=str, default="none,basic,selective,full")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--eval-episodes", type=int, default=15)
    p.add_argument("--knockouts", action="store_true",
                   help="also run the component knock-out cells")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-confusion", help="export the confusion ledger CSV")
    _common_flags(p)
    p.add_argument("--checkpoint", type=str, default=None)
    p.add_argument("--eval-episodes", type=int, default=5)
    p.set_defaults(func=cmd_dump_confusion)

    p = sub.add_parser("replay", help="re-derive metrics from a run log")
    p.add_argument("--log", type=str, required=True)
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigFileError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        log.error("missing file: %s", exc)
        return EXIT_CONFIG if "config" in str(exc).lower() else EXIT_RUNTIME
    except Exception as exc:  # surfaced with category code
        log.error("runtime failure: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
