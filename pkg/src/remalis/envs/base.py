"""Shared environment machinery: mission generation and team metrics.

Both simulated worlds expose the same cooperative structure: each agent
gets a goal and a small set of private sub-goals (two parallel openers
converging on a closer), adjacent agents share one exclusive boundary
sub-goal whose dependencies span both agents, and every sub-goal carries
a teammate assignment.  The worlds differ in observation content and in
what actions do.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..intent import Belief, belief_claim_estimate
from ..planning import SubgoalGraph

N_PRIVATE_TYPES = 4
N_GOALS = 4


class ConfigError(ValueError):
    """Inconsistent tier parameters."""


@dataclass
class EnvStep:
    """Per-tick environment output."""

    observations: list[np.ndarray]
    true_concepts: list[int]
    correct_actions: list[int]
    action_feats: list[np.ndarray]
    feasible: list[np.ndarray]
    reward: float
    completed: np.ndarray
    progressed: list[bool]
    rejected: list[bool]
    done: bool


@dataclass
class WorldInfo:
    """Static per-episode structure emitted by reset()."""

    n_agents: int
    n_goals: int
    n_subgoals: int
    subgoal_graph: SubgoalGraph
    goal_ids: dict[int, int]
    subgoal_sets: dict[int, tuple[int, ...]]
    assignment: dict[int, dict[int, int]]
    exclusive: set[int]
    owners: dict[int, tuple[int, ...]]
    specialization_map: dict[int, int]
    spec_tags: tuple[str, ...]
    concept_names: tuple[str, ...]
    instruction_feats: dict[int, np.ndarray]
    n_actions: int
    action_adjacency: tuple[tuple[int, int], ...]
    action_feat_width: int
    obs_width: int
    horizon: int


@dataclass
class Mission:
    """Goal/sub-goal layout for one episode."""

    goal_ids: dict[int, int]
    subgoal_sets: dict[int, tuple[int, ...]]
    assignment: dict[int, dict[int, int]]
    graph: SubgoalGraph
    exclusive: set[int]
    owners: dict[int, tuple[int, ...]]
    private_type: dict[int, int]   # private subgoal id -> type index
    shared_boundary: dict[int, tuple[int, int]]
    n_subgoals: int


def n_subgoal_slots(n_agents: int) -> int:
    return n_agents * N_PRIVATE_TYPES + (n_agents - 1)


def generate_mission(n_agents: int, rng: np.random.Generator) -> Mission:
    """Sample the episode's goals, sub-goal choices, order and assignments.

    Sub-goal ids are global and stable: agent a's private type t is
    ``a * 4 + t``; boundary b between agents (b, b+1) is ``4n + b``.
    """
    n_sub = n_subgoal_slots(n_agents)
    goal_ids = {a: int(rng.integers(N_GOALS)) for a in range(n_agents)}
    subgoal_sets: dict[int, tuple[int, ...]] = {}
    edges: list[tuple[int, int]] = []
    private_type: dict[int, int] = {}
    owners: dict[int, tuple[int, ...]] = {}
    closers: dict[int, int] = {}
    for a in range(n_agents):
        chosen = rng.permutation(N_PRIVATE_TYPES)[:3]
        ids = [a * N_PRIVATE_TYPES + int(t) for t in chosen]
        for sg, t in zip(ids, chosen):
            private_type[sg] = int(t)
            owners[sg] = (a,)
        opener_a, opener_b, closer = ids
        edges.append((opener_a, closer))
        edges.append((opener_b, closer))
        closers[a] = closer
        subgoal_sets[a] = (opener_a, opener_b, closer)
    shared_boundary: dict[int, tuple[int, int]] = {}
    exclusive: set[int] = set()
    for b in range(n_agents - 1):
        sg = n_agents * N_PRIVATE_TYPES + b
        shared_boundary[sg] = (b, b + 1)
        exclusive.add(sg)
        owners[sg] = (b, b + 1)
        edges.append((closers[b], sg))
        edges.append((closers[b + 1], sg))
        subgoal_sets[b] = subgoal_sets[b] + (sg,)
        subgoal_sets[b + 1] = subgoal_sets[b + 1] + (sg,)
    assignment: dict[int, dict[int, int]] = {}
    for a in range(n_agents):
        teammates = [x for x in range(n_agents) if x != a]
        offset = int(rng.integers(len(teammates)))
        amap: dict[int, int] = {}
        for idx, sg in enumerate(subgoal_sets[a]):
            if sg in shared_boundary:
                i, j = shared_boundary[sg]
                amap[sg] = j if a == i else i
            else:
                amap[sg] = teammates[(idx + offset) % len(teammates)]
        assignment[a] = amap
    graph = SubgoalGraph(nodes=tuple(range(n_sub)), edges=tuple(sorted(set(edges))))
    return Mission(goal_ids=goal_ids, subgoal_sets=subgoal_sets,
                   assignment=assignment, graph=graph, exclusive=exclusive,
                   owners=owners, private_type=private_type,
                   shared_boundary=shared_boundary, n_subgoals=n_sub)


def specialization_for(mission: Mission) -> dict[int, int]:
    """Ground-truth sub-task -> specialist map used to supervise routing."""
    out = {}
    for sg, owner in mission.owners.items():
        out[sg] = owner[0]
    return out


def instruction_features(mission: Mission, n_agents: int) -> dict[int, np.ndarray]:
    """Sub-goal instruction vectors for the router: type block ++ owner block."""
    feats = {}
    for sg in range(mission.n_subgoals):
        v = np.zeros(N_PRIVATE_TYPES + 1 + n_agents)
        if sg in mission.private_type:
            v[mission.private_type[sg]] = 1.0
        else:
            v[N_PRIVATE_TYPES] = 1.0
        if sg in mission.owners:
            v[N_PRIVATE_TYPES + 1 + mission.owners[sg][0]] = 1.0
        feats[sg] = v
    return feats


def alignment(claims: dict[int, int | None],
              beliefs: dict[tuple[int, int], Belief],
              completed: np.ndarray,
              graph: SubgoalGraph,
              exclusive: set[int],
              remaining: dict[int, int] | None = None) -> float:
    """Fraction of agents whose claimed sub-goal is coherent team-wide.

    A claim counts when it is (a) dependency-feasible and still pending,
    (b) not double-claimed if exclusive, and (c) matched by every
    teammate's belief argmax.  Agents whose work is finished (``remaining``
    of zero) count as aligned; agents with a claim but unfinished work
    must pass all three checks.
    """
    agents = sorted(claims)
    aligned = 0
    for i in agents:
        claim = claims[i]
        if claim is None:
            if remaining is not None and remaining.get(i, 1) == 0:
                aligned += 1
            continue
        if completed[claim]:
            continue
        if any(not completed[u] for u in graph.predecessors(claim)):
            continue
        if claim in exclusive and any(claims[j] == claim for j in agents if j != i):
            continue
        ok = True
        for j in agents:
            if j == i:
                continue
            b = beliefs.get((j, i))
            if b is None or belief_claim_estimate(b) != claim:
                ok = False
                break
        if ok:
            aligned += 1
    return aligned / len(agents)


def coordination_time(alignment_series: list[float], threshold: float,
                      sustain: int = 3) -> int | None:
    """First tick from which alignment stays >= threshold for ``sustain`` ticks."""
    if not (0.0 < threshold <= 1.0):
        raise ValueError(f"threshold must lie in (0, 1], got {threshold}")
    n = len(alignment_series)
    run = 0
    for t, a in enumerate(alignment_series):
        run = run + 1 if a >= threshold else 0
        if run >= sustain:
            return t - sustain + 1
    return None
