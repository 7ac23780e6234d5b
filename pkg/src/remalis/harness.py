"""Experiment harness: metrics persistence, ablation grids, trace replay.

Metrics land in two artifacts per run: a byte-deterministic CSV (no
wall-clock column, so identical seeds give identical bytes) and a JSONL
sidecar carrying the same rows plus wall-clock seconds.  The ablation
runner pins identical seed lists across cells so mode and tier
comparisons are paired.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import alignment as alignment_metric
from .envs import coordination_time, make_env
from .intent import Belief
from .planning import SubgoalGraph
from .trainer import (
    EpisodeTrace,
    RunConfig,
    Team,
    build_team,
    evaluate,
    knockout_feedback,
    run_training,
)

CSV_COLUMNS = ("cell", "seed", "episode", "return", "alignment",
               "coordination_time", "e_sum", "u_mean", "replans")


class IOErrorWithPath(IOError):
    pass


@dataclass
class MetricsRow:
    cell: str
    seed: int
    episode: int
    episode_return: float
    alignment: float
    coordination_time: int | None
    e_sum: int
    u_mean: float
    replans: int
    wall_clock: float = 0.0

    def csv_values(self) -> list:
        ct = "none" if self.coordination_time is None else self.coordination_time
        return [self.cell, self.seed, self.episode,
                f"{self.episode_return:.10g}", f"{self.alignment:.10g}", ct,
                self.e_sum, f"{self.u_mean:.10g}", self.replans]

    def to_json(self) -> dict:
        return {
            "cell": self.cell, "seed": self.seed, "episode": self.episode,
            "return": self.episode_return, "alignment": self.alignment,
            "coordination_time": self.coordination_time, "e_sum": self.e_sum,
            "u_mean": self.u_mean, "replans": self.replans,
            "wall_clock": self.wall_clock,
        }


@dataclass
class ExperimentSpec:
    name: str
    cells: list[tuple[str, RunConfig]]
    seeds: list[int]
    eval_episodes: int = 15
    out_dir: str = "runs"

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("seed list must be nonempty")
        names = [c for c, _ in self.cells]
        if len(set(names)) != len(names):
            raise ValueError("cell names must be unique")


def write_metrics(rows: list[MetricsRow], out_dir: str | Path,
                  name: str = "metrics") -> tuple[Path, Path]:
    """Persist rows as CSV (deterministic) + JSONL (adds wall-clock)."""
    if not rows:
        raise ValueError("write_metrics needs at least one row")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{name}.csv"
        with csv_path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(CSV_COLUMNS)
            for row in rows:
                writer.writerow(row.csv_values())
        jsonl_path = out / f"{name}.jsonl"
        with jsonl_path.open("w") as fh:
            for row in rows:
                fh.write(json.dumps(row.to_json()) + "\n")
    except OSError as exc:
        raise IOErrorWithPath(f"cannot write metrics under {out}: {exc}") from exc
    return csv_path, jsonl_path


def summarize(rows: list[MetricsRow], horizon: int) -> dict[str, dict[str, tuple[float, float]]]:
    """Per-cell mean and stddev; coordination_time censored at the horizon."""
    if not rows:
        raise ValueError("summarize needs at least one row")
    cells: dict[str, list[MetricsRow]] = {}
    for r in rows:
        cells.setdefault(r.cell, []).append(r)

    def stats(vals: list[float]) -> tuple[float, float]:
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std(ddof=0))

    out: dict[str, dict[str, tuple[float, float]]] = {}
    for cell, cell_rows in sorted(cells.items()):
        out[cell] = {
            "return": stats([r.episode_return for r in cell_rows]),
            "alignment": stats([r.alignment for r in cell_rows]),
            "coordination_time": stats(
                [float(horizon if r.coordination_time is None else r.coordination_time)
                 for r in cell_rows]),
            "e_sum": stats([float(r.e_sum) for r in cell_rows]),
            "u_mean": stats([r.u_mean for r in cell_rows]),
            "replans": stats([float(r.replans) for r in cell_rows]),
        }
    return out


def write_summary(summary: dict, out_dir: str | Path, name: str = "summary") -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{name}.csv"
    metrics = ("alignment", "coordination_time", "return", "e_sum", "u_mean", "replans")
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell"] + [f"{m}_{s}" for m in metrics for s in ("mean", "std")])
        for cell in sorted(summary):
            row = [cell]
            for m in metrics:
                mean, std = summary[cell][m]
                row += [f"{mean:.10g}", f"{std:.10g}"]
            writer.writerow(row)
    return path


# -- experiment runners -----------------------------------------------------

def eval_rows(cell: str, seed: int, team: Team, config: RunConfig,
              eval_episodes: int, wall_clock: float) -> tuple[list[MetricsRow], list[EpisodeTrace]]:
    env = make_env(config.env_kind, config.tier, n_agents=config.n_agents,
                   horizon=config.ticks)
    traces = evaluate(team, env, config, eval_episodes)
    rows = []
    for i, trace in enumerate(traces):
        rows.append(MetricsRow(
            cell=cell, seed=seed, episode=i,
            episode_return=trace.episode_return,
            alignment=trace.mean_alignment,
            coordination_time=trace.coordination_tick(config.alignment_threshold),
            e_sum=trace.e_sum, u_mean=trace.u_mean, replans=trace.replans,
            wall_clock=wall_clock))
    return rows, traces


def run_cell(cell: str, config: RunConfig, seeds: list[int],
             eval_episodes: int) -> tuple[list[MetricsRow], list[EpisodeTrace]]:
    rows: list[MetricsRow] = []
    traces: list[EpisodeTrace] = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        t0 = time.perf_counter()
        team, _metrics, _ = run_training(cfg)
        wall = time.perf_counter() - t0
        r, t = eval_rows(cell, seed, team, cfg, eval_episodes, wall)
        rows.extend(r)
        traces.extend(t)
    return rows, traces


def run_ablation(base: RunConfig, tiers: list[str], modes: list[str],
                 seeds: list[int], eval_episodes: int = 15,
                 progress=None) -> list[MetricsRow]:
    """Propagation-mode x tier grid with paired seeds across cells."""
    rows: list[MetricsRow] = []
    for tier in tiers:
        for mode in modes:
            cell = f"{tier}/{mode}"
            cfg = dataclasses.replace(base, tier=tier, channel_mode=mode)
            cell_rows, _ = run_cell(cell, cfg, seeds, eval_episodes)
            rows.extend(cell_rows)
            if progress is not None:
                progress(cell, cell_rows)
    return rows


KNOCKOUT_CELLS = ("full_system", "no_propagation", "no_feedback", "ff_planner")


def run_knockouts(base: RunConfig, seeds: list[int],
                  eval_episodes: int = 15, progress=None) -> list[MetricsRow]:
    """Component knock-outs vs the full system, paired seeds."""
    variants = {
        "full_system": base,
        "no_propagation": dataclasses.replace(base, channel_mode="none"),
        "no_feedback": knockout_feedback(base),
        "ff_planner": dataclasses.replace(base, planner_graph_head=False),
    }
    rows: list[MetricsRow] = []
    for cell in KNOCKOUT_CELLS:
        cell_rows, _ = run_cell(cell, variants[cell], seeds, eval_episodes)
        rows.extend(cell_rows)
        if progress is not None:
            progress(cell, cell_rows)
    return rows


# -- trace logs and replay -----------------------------------------------------

def write_trace_log(traces: list[EpisodeTrace], config: RunConfig,
                    path: str | Path, final_memory: np.ndarray | None = None) -> Path:
    """Run log: per-episode header, tick records, and a final-run footer."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        fh.write(json.dumps({
            "type": "run_start", "env_kind": config.env_kind, "tier": config.tier,
            "n_agents": config.n_agents, "ticks": config.ticks,
            "alpha": config.alpha, "beta": config.beta,
            "alignment_threshold": config.alignment_threshold,
            "weight_decay": config.weight_decay,
        }) + "\n")
        for trace in traces:
            info = trace.info
            fh.write(json.dumps({
                "type": "episode_start", "seed": trace.seed, "env_seed": trace.env_seed,
                "graph_nodes": list(info.subgoal_graph.nodes),
                "graph_edges": [list(e) for e in info.subgoal_graph.edges],
                "exclusive": sorted(info.exclusive),
                "subgoal_sets": {str(a): list(v) for a, v in info.subgoal_sets.items()},
                "goal_ids": {str(a): v for a, v in info.goal_ids.items()},
            }) + "\n")
            for rec in trace.ticks:
                fh.write(json.dumps({"type": "tick", **rec.to_json()}) + "\n")
            fh.write(json.dumps({
                "type": "episode_end", "seed": trace.seed,
                "return": trace.episode_return, "e_sum": trace.e_sum,
                "u_mean": trace.u_mean, "replans": trace.replans,
                "mean_alignment": trace.mean_alignment,
            }) + "\n")
        if final_memory is not None:
            fh.write(json.dumps({"type": "run_end",
                                 "memory": final_memory.tolist()}) + "\n")
    return path


def _recount_errors(claims: dict[int, int | None], belief_argmax: dict[str, int],
                    exclusive: set[int], n_agents: int) -> int:
    errors = 0
    for i in range(n_agents):
        for j in range(n_agents):
            if i == j:
                continue
            mismatch = False
            if claims[j] is not None:
                mismatch = belief_argmax.get(f"{i},{j}", -1) != claims[j]
            double = (claims[i] is not None and claims[i] == claims[j]
                      and claims[i] in exclusive)
            if mismatch or double:
                errors += 1
    return errors


def _recount_alignment(claims: dict[int, int | None], belief_argmax: dict[str, int],
                       completed: set[int], graph: SubgoalGraph, exclusive: set[int],
                       subgoal_sets: dict[int, list[int]], n_agents: int) -> float:
    aligned = 0
    for i in range(n_agents):
        c = claims[i]
        if c is None:
            if all(sg in completed for sg in subgoal_sets[i]):
                aligned += 1
            continue
        if c in completed:
            continue
        if any(u not in completed for u in graph.predecessors(c)):
            continue
        if c in exclusive and any(claims[j] == c for j in range(n_agents) if j != i):
            continue
        if all(belief_argmax.get(f"{j},{i}", -1) == c
               for j in range(n_agents) if j != i):
            aligned += 1
    return aligned / n_agents


def replay_log(path: str | Path) -> list[str]:
    """Re-derive metrics from a run log and report every discrepancy.

    Checks per tick: the E count, the alignment value, and (by re-running
    the environment on the logged actions and claims) the reward series;
    run-wide, the episodic confusion memory against the event log and the
    collective-objective components against the per-tick series.
    """
    discrepancies: list[str] = []
    run_meta: dict = {}
    episode_meta: dict = {}
    ticks: list[dict] = []
    memory_recount: np.ndarray | None = None
    env = None

    def check_episode():
        nonlocal env
        if not episode_meta:
            return
        n_agents = run_meta["n_agents"]
        graph = SubgoalGraph(nodes=tuple(episode_meta["graph_nodes"]),
                             edges=tuple(tuple(e) for e in episode_meta["graph_edges"]))
        exclusive = set(episode_meta["exclusive"])
        subgoal_sets = {int(a): v for a, v in episode_meta["subgoal_sets"].items()}
        env = make_env(run_meta["env_kind"], run_meta["tier"], n_agents=n_agents,
                       horizon=run_meta["ticks"])
        env.reset(episode_meta["env_seed"])
        for rec in ticks:
            claims = {int(a): v for a, v in rec["claims"].items()}
            e_expect = _recount_errors(claims, rec["belief_argmax"], exclusive, n_agents)
            if e_expect != rec["E"]:
                discrepancies.append(
                    f"episode {episode_meta['seed']} tick {rec['tick']}: E {rec['E']} != recount {e_expect}")
            a_expect = _recount_alignment(claims, rec["belief_argmax"],
                                          set(rec["completed"]), graph, exclusive,
                                          subgoal_sets, n_agents)
            if abs(a_expect - rec["alignment"]) > 1e-9:
                discrepancies.append(
                    f"episode {episode_meta['seed']} tick {rec['tick']}: alignment "
                    f"{rec['alignment']:.6f} != recount {a_expect:.6f}")
            out = env.step(rec["actions"], claims)
            if abs(out.reward - rec["reward"]) > 1e-10:
                discrepancies.append(
                    f"episode {episode_meta['seed']} tick {rec['tick']}: reward "
                    f"{rec['reward']!r} != replay {out.reward!r}")

    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            kind = rec.pop("type")
            if kind == "run_start":
                run_meta = rec
            elif kind == "episode_start":
                episode_meta = rec
                ticks = []
            elif kind == "tick":
                ticks.append(rec)
                if memory_recount is None:
                    k = 0
                    for (i, j) in rec["confusion_events"]:
                        k = max(k, i + 1, j + 1)
                    memory_recount = np.zeros((max(k, 1), max(k, 1)), dtype=np.int64)
                for (i, j) in rec["confusion_events"]:
                    if max(i, j) >= memory_recount.shape[0]:
                        grown = np.zeros((max(i, j) + 1, max(i, j) + 1), dtype=np.int64)
                        grown[:memory_recount.shape[0], :memory_recount.shape[1]] = memory_recount
                        memory_recount = grown
                    memory_recount[i, j] += 1
                    memory_recount[j, i] += 1
            elif kind == "episode_end":
                check_episode()
                expected_return = sum(t["reward"] for t in ticks)
                if abs(expected_return - rec["return"]) > 1e-10:
                    discrepancies.append(
                        f"episode {rec['seed']}: return {rec['return']!r} != "
                        f"sum of tick rewards {expected_return!r}")
                episode_meta = {}
                ticks = []
            elif kind == "run_end" and memory_recount is not None:
                logged = np.asarray(rec["memory"], dtype=np.int64)
                k = memory_recount.shape[0]
                padded = np.zeros_like(logged)
                padded[:k, :k] = memory_recount
                if not np.array_equal(padded, logged):
                    discrepancies.append("episodic memory M does not match event recount")
    return discrepancies


def collective_objective_from_log(path: str | Path) -> tuple[float, dict[str, float]]:
    """Spreadsheet-style recomputation of the collective objective."""
    u_all: list[float] = []
    e_all: list[float] = []
    returns: list[float] = []
    alpha = beta = 0.0
    current = 0.0
    with Path(path).open() as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["type"] == "run_start":
                alpha, beta = rec["alpha"], rec["beta"]
            elif rec["type"] == "tick":
                u_all.append(rec["U"])
                e_all.append(rec["E"])
                current += rec["reward"]
            elif rec["type"] == "episode_end":
                returns.append(current)
                current = 0.0
    breakdown = {
        "alpha_U": alpha * float(np.mean(u_all)) if u_all else 0.0,
        "beta_E": beta * float(np.mean(e_all)) if e_all else 0.0,
        "neg_return": -float(np.mean(returns)) if returns else 0.0,
        "decay": 0.0,
    }
    return sum(breakdown.values()), breakdown
