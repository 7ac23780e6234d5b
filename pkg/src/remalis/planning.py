"""Dependency-aware sub-goal planning.

``plan_next`` scores the global sub-goal vocabulary with one round of
graph message passing over the episode's dependency graph, then masks
and renormalizes so blocked sub-goals get exactly zero probability.
``replan`` is the re-planning primitive: a stable topological reorder
that pushes a problematic sub-goal (and its dependents) behind the
currently feasible work, reassigning its helper to the least-loaded
eligible teammate.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .intent import Intention
from .numerics import Tensor
from .optim import AdamW


class DeadlockError(RuntimeError):
    """Every sub-goal is masked; surfaced to the trainer as a replan trigger."""


class TriggerError(ValueError):
    """A replan trigger names a sub-goal outside the intention."""


class DataError(ValueError):
    """A training label is masked at its own tick."""


@dataclass(frozen=True)
class SubgoalGraph:
    """Directed dependency graph over sub-goal ids (u must precede v)."""

    nodes: tuple[int, ...]
    edges: tuple[tuple[int, int], ...]

    def __post_init__(self):
        node_set = set(self.nodes)
        preds: dict[int, list[int]] = {n: [] for n in self.nodes}
        for (u, v) in self.edges:
            if u not in node_set or v not in node_set:
                raise ValueError(f"edge ({u}, {v}) references unknown node")
            preds[v].append(u)
        object.__setattr__(self, "_preds", preds)
        if self.has_cycle():
            raise ValueError("subgoal dependency graph must be acyclic")

    def predecessors(self, v: int) -> list[int]:
        return self._preds.get(v, [])

    def descendants(self, root: int) -> set[int]:
        out: set[int] = set()
        frontier = [root]
        while frontier:
            u = frontier.pop()
            for (a, b) in self.edges:
                if a == u and b not in out:
                    out.add(b)
                    frontier.append(b)
        return out

    def has_cycle(self) -> bool:
        return self.topological_order() is None

    def topological_order(self) -> list[int] | None:
        indeg = {n: 0 for n in self.nodes}
        for (_u, v) in self.edges:
            indeg[v] += 1
        queue = sorted(n for n, d in indeg.items() if d == 0)
        order: list[int] = []
        while queue:
            n = queue.pop(0)
            order.append(n)
            for (u, v) in self.edges:
                if u == n:
                    indeg[v] -= 1
                    if indeg[v] == 0:
                        queue.append(v)
            queue.sort()
        return order if len(order) == len(self.nodes) else None

    def is_valid_order(self, order: tuple[int, ...] | list[int]) -> bool:
        pos = {n: i for i, n in enumerate(order)}
        return all(pos[u] < pos[v] for (u, v) in self.edges
                   if u in pos and v in pos)


def _init(rng: np.random.Generator, *shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


@dataclass
class PlannerConfig:
    hidden: int = 32
    node_feat_width: int = 9
    graph_head: bool = True  # False swaps in the feed-forward knockout head


class Planner:
    """Scores sub-goals from (observation, intention, embedding, feedback)."""

    def __init__(self, in_width: int, n_subgoals: int, config: PlannerConfig,
                 rng: np.random.Generator):
        self.in_width = in_width
        self.n_subgoals = n_subgoals
        self.config = config
        h = config.hidden
        nf = config.node_feat_width
        p: dict[str, Tensor] = {}
        p["enc.W1"] = _init(rng, in_width, h)
        p["enc.b1"] = Tensor(np.zeros(h), requires_grad=True)
        p["enc.W2"] = _init(rng, h, h)
        p["enc.b2"] = Tensor(np.zeros(h), requires_grad=True)
        if config.graph_head:
            p["node.Wf"] = _init(rng, nf, h)
            p["node.Wh"] = _init(rng, h, h, scale=0.2)
            p["gmp.W_self"] = _init(rng, h, h, scale=0.3)
            p["gmp.W_msg"] = _init(rng, h, h, scale=0.3)
            p["gmp.b"] = Tensor(np.zeros(h), requires_grad=True)
            # no scalar output bias: softmax shift-invariance would make it dead
            p["out.w"] = _init(rng, h, 1, scale=0.5)
        else:
            p["ff.W1"] = _init(rng, h, h)
            p["ff.b1"] = Tensor(np.zeros(h), requires_grad=True)
            p["ff.W2"] = _init(rng, h, n_subgoals)
            p["ff.b2"] = Tensor(np.zeros(n_subgoals), requires_grad=True)
        self.params = p

    def named_params(self, prefix: str = "planner") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def logits_t(self, x: Tensor, node_feats: Tensor,
                 graph: SubgoalGraph) -> Tensor:
        p = self.params
        h = nm.tanh(nm.add(nm.matmul(x, p["enc.W1"]), p["enc.b1"]))
        h = nm.tanh(nm.add(nm.matmul(h, p["enc.W2"]), p["enc.b2"]))
        if not self.config.graph_head:
            hid = nm.tanh(nm.add(nm.matmul(h, p["ff.W1"]), p["ff.b1"]))
            return nm.add(nm.matmul(hid, p["ff.W2"]), p["ff.b2"])
        context = nm.matmul(h, p["node.Wh"])
        feats = nm.tanh(nm.add(nm.matmul(node_feats, p["node.Wf"]),
                               nm.reshape(context, (1, -1))))
        passed = nm.graph_message_pass(feats, graph.edges,
                                       {"W_self": p["gmp.W_self"],
                                        "W_msg": p["gmp.W_msg"],
                                        "b": p["gmp.b"]})
        return nm.reshape(nm.matmul(passed, p["out.w"]), (-1,))

    def masked_dist_t(self, x: Tensor, node_feats: Tensor, graph: SubgoalGraph,
                      mask: np.ndarray) -> Tensor:
        if not mask.any():
            raise DeadlockError("all sub-goals masked")
        logits = self.logits_t(x, node_feats, graph)
        neg = np.where(mask, 0.0, -1e30)
        return nm.softmax(nm.add(logits, Tensor(neg)))

    def plan_next(self, x: np.ndarray, node_feats: np.ndarray, graph: SubgoalGraph,
                  mask: np.ndarray) -> np.ndarray:
        """Masked distribution over the sub-goal vocabulary (rollout path)."""
        with nm.no_grad():
            dist = self.masked_dist_t(Tensor(x), Tensor(node_feats), graph, mask)
        out = dist.data.copy()
        out[~mask] = 0.0
        s = out.sum()
        if s <= 0:
            raise DeadlockError("all sub-goals masked after renormalization")
        return out / s


@dataclass
class PlannerSample:
    """One realized claim transition for likelihood training."""

    x: np.ndarray
    node_feats: np.ndarray
    mask: np.ndarray
    label: int


def train_planner(planner: Planner, graph: SubgoalGraph,
                  samples: list[PlannerSample], steps: int = 1,
                  lr: float = 1e-2, weight_decay: float = 0.0) -> list[float]:
    """Gradient steps on the sequence negative log-likelihood."""
    if not samples:
        raise ValueError("train_planner requires nonempty trajectories")
    for s in samples:
        if not s.mask[s.label]:
            raise DataError(f"label {s.label} masked at its own tick")
    opt = AdamW(planner.params, lr=lr, weight_decay=weight_decay)
    trace = []
    for _ in range(steps):
        losses = []
        for s in samples:
            dist = planner.masked_dist_t(Tensor(s.x), Tensor(s.node_feats),
                                         graph, s.mask)
            losses.append(-nm.log(nm.clip_min(dist[s.label], 1e-12)))
        total = losses[0]
        for l in losses[1:]:
            total = total + l
        total = total * (1.0 / len(losses))
        opt.zero_grad()
        nm.backward(total, params=list(planner.params.values()))
        opt.step()
        trace.append(float(total.data))
    return trace


@dataclass
class ReplanTrigger:
    """R_t payload: the problematic sub-goal plus the context replan needs."""

    subgoal: int
    feasible: set[int] = field(default_factory=set)
    team_load: dict[int, int] = field(default_factory=dict)
    eligible_agents: tuple[int, ...] = ()
    reason: str = "stuck"


def replan(intention: Intention, trigger: ReplanTrigger,
           graph: SubgoalGraph) -> Intention:
    """Stable topological reorder moving the trigger sub-goal late.

    The triggered sub-goal and its dependents keep their relative order
    but move behind every other remaining sub-goal (in particular behind
    all currently feasible ones); the next-sub-goal distribution is
    re-normalized onto the new order and the trigger's helper assignment
    moves to the least-loaded eligible agent.
    """
    sigma = trigger.subgoal
    if sigma not in intention.subgoals:
        raise TriggerError(f"trigger names sub-goal {sigma} outside the intention")
    moved_set = {sigma} | (graph.descendants(sigma) & set(intention.subgoals))
    kept = [s for s in intention.subgoals if s not in moved_set]
    moved = [s for s in intention.subgoals if s in moved_set]
    new_order = tuple(kept + moved)
    probs = {s: p for s, p in zip(intention.subgoals, intention.next_subgoal_dist)}
    dist = np.array([probs[s] for s in new_order])
    s = dist.sum()
    dist = dist / s if s > 0 else np.full(len(new_order), 1.0 / len(new_order))
    assignment = dict(intention.assignment)
    if trigger.eligible_agents:
        load = {a: trigger.team_load.get(a, 0) for a in trigger.eligible_agents}
        assignment[sigma] = min(sorted(load), key=lambda a: load[a])
    return Intention(goal_id=intention.goal_id, subgoals=new_order,
                     next_subgoal_dist=dist, assignment=assignment)
