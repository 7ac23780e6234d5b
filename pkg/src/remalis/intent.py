"""Intention data model and its fixed-width wire encoding.

An intention is the unit of communication between agents: the current
goal, the ordered set of remaining sub-goals, a distribution over the
next sub-goal, and a teammate assignment per sub-goal.  The codec packs
it into one f64 vector: one-hot goal block, multi-hot sub-goal block,
next-sub-goal probabilities at the sub-goal slots, and a flattened
one-hot assignment block.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DIST_TOL = 1e-9


class VocabularyError(ValueError):
    """A symbol id falls outside the configured vocabulary."""


class DecodeError(ValueError):
    """A payload does not decode to a valid intention."""


def _check_dist(p: np.ndarray, what: str) -> None:
    if p.size and (np.min(p) < -DIST_TOL or abs(float(np.sum(p)) - 1.0) > DIST_TOL):
        raise ValueError(f"{what} is not a distribution (sum={float(np.sum(p))!r})")


@dataclass
class Intention:
    """Private intention of one agent.

    ``subgoals`` is ordered (the agent's planned execution order) and
    holds the *remaining* sub-goals; completed ones are pruned.
    ``next_subgoal_dist[k]`` is the probability of ``subgoals[k]``.
    """

    goal_id: int
    subgoals: tuple[int, ...]
    next_subgoal_dist: np.ndarray
    assignment: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        self.next_subgoal_dist = np.asarray(self.next_subgoal_dist, dtype=np.float64)
        self.validate()

    def validate(self) -> None:
        if len(self.next_subgoal_dist) != len(self.subgoals):
            raise ValueError("next_subgoal_dist length must equal |subgoals|")
        _check_dist(self.next_subgoal_dist, "next_subgoal_dist")
        for sg, agent in self.assignment.items():
            if sg not in self.subgoals:
                raise ValueError(f"assignment key {sg} not in subgoal set")
            if agent < 0:
                raise ValueError(f"assignment target {agent} is not a valid agent id")

    def claim(self) -> int | None:
        """Currently claimed sub-goal: argmax of the next-sub-goal distribution."""
        if not self.subgoals:
            return None
        return self.subgoals[int(np.argmax(self.next_subgoal_dist))]


@dataclass
class IntentionMessage:
    sender: int
    recipient: int
    payload: np.ndarray
    tick: int


@dataclass
class Belief:
    """A receiver's inferred distribution over a teammate's intention."""

    subject: int
    goal_probs: np.ndarray
    subgoal_probs: np.ndarray
    confidence: float = 0.0

    def __post_init__(self):
        self.goal_probs = np.asarray(self.goal_probs, dtype=np.float64)
        self.subgoal_probs = np.asarray(self.subgoal_probs, dtype=np.float64)
        _check_dist(self.goal_probs, "goal_probs")
        _check_dist(self.subgoal_probs, "subgoal_probs")
        self.confidence = float(self.confidence)


def belief_claim_estimate(b: Belief) -> int | None:
    """Argmax of the sub-goal belief, or None when there is no unique peak.

    The untouched uniform prior therefore never "matches" any claim.
    """
    p = b.subgoal_probs
    top = int(np.argmax(p))
    if np.count_nonzero(p >= p[top] - 1e-12) > 1:
        return None
    return top


def belief_confidence(subgoal_probs: np.ndarray) -> float:
    """1 minus entropy of the sub-goal distribution, normalized to [0, 1]."""
    p = np.asarray(subgoal_probs, dtype=np.float64)
    k = p.size
    if k <= 1:
        return 1.0
    q = np.clip(p, 1e-12, 1.0)
    h = -float(np.sum(q * np.log(q)))
    return max(0.0, min(1.0, 1.0 - h / math.log(k)))


@dataclass(frozen=True)
class IntentionCodec:
    """Fixed-width block layout for a (goals, subgoals, agents) vocabulary."""

    n_goals: int
    n_subgoals: int
    n_agents: int

    @property
    def width(self) -> int:
        return self.n_goals + 2 * self.n_subgoals + self.n_subgoals * self.n_agents

    # Block offsets inside the payload vector.
    @property
    def goal_slice(self) -> slice:
        return slice(0, self.n_goals)

    @property
    def subgoal_slice(self) -> slice:
        return slice(self.n_goals, self.n_goals + self.n_subgoals)

    @property
    def dist_slice(self) -> slice:
        return slice(self.n_goals + self.n_subgoals, self.n_goals + 2 * self.n_subgoals)

    @property
    def assign_slice(self) -> slice:
        start = self.n_goals + 2 * self.n_subgoals
        return slice(start, start + self.n_subgoals * self.n_agents)

    def encode(self, intention: Intention) -> np.ndarray:
        intention.validate()
        if not (0 <= intention.goal_id < self.n_goals):
            raise VocabularyError(f"goal id {intention.goal_id} outside vocabulary of {self.n_goals}")
        v = np.zeros(self.width)
        v[intention.goal_id] = 1.0
        for pos, sg in enumerate(intention.subgoals):
            if not (0 <= sg < self.n_subgoals):
                raise VocabularyError(f"subgoal id {sg} outside vocabulary of {self.n_subgoals}")
            v[self.n_goals + sg] = 1.0
            v[self.n_goals + self.n_subgoals + sg] = intention.next_subgoal_dist[pos]
        base = self.n_goals + 2 * self.n_subgoals
        for sg, agent in intention.assignment.items():
            if not (0 <= agent < self.n_agents):
                raise VocabularyError(f"agent id {agent} outside team of {self.n_agents}")
            v[base + sg * self.n_agents + agent] = 1.0
        return v

    def decode(self, v: np.ndarray) -> Intention:
        """Exact inverse of :meth:`encode` on its image (subgoals id-sorted)."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.width,):
            raise DecodeError(f"payload width {v.shape} does not match codec width {self.width}")
        goal_bits = np.flatnonzero(v[self.goal_slice] != 0.0)
        if goal_bits.size != 1:
            raise DecodeError(f"expected exactly one active goal bit, found {goal_bits.size}")
        goal_id = int(goal_bits[0])
        subgoals = tuple(int(s) for s in np.flatnonzero(v[self.subgoal_slice] != 0.0))
        dist_block = v[self.dist_slice]
        dist = np.array([dist_block[sg] for sg in subgoals])
        if subgoals:
            s = float(dist.sum())
            if abs(s - 1.0) > 1e-6:
                raise DecodeError(f"subgoal distribution block sums to {s}")
            dist = dist / s
        assign_block = v[self.assign_slice].reshape(self.n_subgoals, self.n_agents)
        assignment: dict[int, int] = {}
        for sg in subgoals:
            hits = np.flatnonzero(assign_block[sg] != 0.0)
            if hits.size > 1:
                raise DecodeError(f"subgoal {sg} has {hits.size} assignment bits")
            if hits.size == 1:
                assignment[sg] = int(hits[0])
        return Intention(goal_id=goal_id, subgoals=subgoals,
                         next_subgoal_dist=dist, assignment=assignment)

    def encode_goal_only(self, intention: Intention) -> np.ndarray:
        """Payload carrying only the goal block (basic propagation)."""
        v = np.zeros(self.width)
        if not (0 <= intention.goal_id < self.n_goals):
            raise VocabularyError(f"goal id {intention.goal_id} outside vocabulary of {self.n_goals}")
        v[intention.goal_id] = 1.0
        return v

    def encode_selected(self, intention: Intention, subgoals: tuple[int, ...]) -> np.ndarray:
        """Goal block plus the sub-goal blocks restricted to ``subgoals``.

        The restricted view carries both the membership bit and the
        next-sub-goal probability of each selected sub-goal.
        """
        v = self.encode_goal_only(intention)
        probs = {sg: p for sg, p in zip(intention.subgoals, intention.next_subgoal_dist)}
        for sg in subgoals:
            if not (0 <= sg < self.n_subgoals):
                raise VocabularyError(f"subgoal id {sg} outside vocabulary of {self.n_subgoals}")
            v[self.n_goals + sg] = 1.0
            v[self.n_goals + self.n_subgoals + sg] = probs.get(sg, 0.0)
        return v


def encode_intention(intention: Intention, codec: IntentionCodec) -> np.ndarray:
    return codec.encode(intention)


def decode_intention(v: np.ndarray, codec: IntentionCodec) -> Intention:
    return codec.decode(v)


def intention_to_record(i: Intention) -> dict:
    """JSON-ready snapshot for the run log."""
    return {
        "goal_id": i.goal_id,
        "subgoals": list(i.subgoals),
        "next_subgoal_dist": [float(x) for x in i.next_subgoal_dist],
        "assignment": {str(k): v for k, v in i.assignment.items()},
    }


def belief_to_record(b: Belief) -> dict:
    return {
        "subject": b.subject,
        "goal_probs": [float(x) for x in b.goal_probs],
        "subgoal_probs": [float(x) for x in b.subgoal_probs],
        "confidence": b.confidence,
    }
