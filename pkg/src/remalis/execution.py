"""Specialized execution agents and the upstream feedback path.

Each agent owns an observation encoder and a graph-factorized action
head: per-action scores come from one message-passing round over the
environment's action-adjacency graph, and the policy is the softmax of
their logs over feasible actions.  Team-level machinery lives here too:
the attention aggregator producing the coordination summary c, the
routing head with its cross-entropy loss, the feedback-conditioned
policy approximation for the auxiliary loss, and ``produce_feedback``
which assembles (c, E, U, R) for the upstream modules.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .grounding import GroundedEmbedding
from .intent import Belief, Intention, belief_claim_estimate
from .numerics import Tensor

SCORE_FLOOR = 1e-12


class ExecutionError(RuntimeError):
    """No feasible action for an agent this tick (counts toward E)."""


class TeamError(ValueError):
    """Per-agent outputs and labels are misaligned."""


class TargetError(ValueError):
    """Routing target w* is not a distribution."""


class CoverageError(ValueError):
    """An agent observation is missing from a team-level aggregation."""


@dataclass
class FeedbackBundle:
    """Upstream signals: coordination summary plus interpretability scalars.

    ``conflicts`` carries the per-pair detail behind the E count so the
    team controller can arbitrate double-claims next tick.
    """

    c: np.ndarray
    E: int
    U: float
    R: int | None
    tick: int
    conflicts: tuple[tuple[int, int, int], ...] = ()  # (agent_i, agent_j, subgoal)

    def __post_init__(self):
        if self.E < 0:
            raise ValueError("E must be a nonnegative count")
        if not np.isfinite(self.U):
            raise ValueError("U must be finite")


@dataclass
class RoutingWeights:
    w: np.ndarray
    target: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if np.min(self.w) < -1e-9 or abs(float(self.w.sum()) - 1.0) > 1e-9:
            raise ValueError("routing weights must be a distribution")


def _init(rng: np.random.Generator, *shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


_ADJ_CACHE: dict[tuple[int, tuple[tuple[int, int], ...]], np.ndarray] = {}


def adjacency_matrix(n: int, edges: tuple[tuple[int, int], ...]) -> np.ndarray:
    """Row-normalized in-neighbor averaging matrix used by message passing."""
    key = (n, edges)
    cached = _ADJ_CACHE.get(key)
    if cached is not None:
        return cached
    agg = np.zeros((n, n))
    indeg = np.zeros(n)
    for (u, v) in edges:
        agg[v, u] += 1.0
        indeg[v] += 1.0
    nz = indeg > 0
    agg[nz] /= indeg[nz, None]
    if len(_ADJ_CACHE) < 64:
        _ADJ_CACHE[key] = agg
    return agg


class AgentPolicy:
    """One specialized agent: encoder phi_i plus a graph action head."""

    def __init__(self, agent_id: int, tag: str, obs_width: int, intent_width: int,
                 c_width: int, action_feat_width: int, enc_width: int,
                 rng: np.random.Generator):
        self.agent_id = agent_id
        self.tag = tag
        self.obs_width = obs_width
        in_width = obs_width + intent_width + c_width
        p: dict[str, Tensor] = {}
        p["obs.W"] = _init(rng, obs_width, enc_width)
        p["obs.b"] = Tensor(np.zeros(enc_width), requires_grad=True)
        p["ctx.W"] = _init(rng, in_width, enc_width)
        p["ctx.b"] = Tensor(np.zeros(enc_width), requires_grad=True)
        p["act.Wf"] = _init(rng, action_feat_width, enc_width)
        p["act.Wh"] = _init(rng, enc_width, enc_width, scale=0.2)
        p["gmp.W_self"] = _init(rng, enc_width, enc_width, scale=0.3)
        p["gmp.W_msg"] = _init(rng, enc_width, enc_width, scale=0.3)
        p["gmp.b"] = Tensor(np.zeros(enc_width), requires_grad=True)
        p["score.w"] = _init(rng, enc_width, 1, scale=0.5)
        self.params = p

    def named_params(self, prefix: str | None = None) -> dict[str, Tensor]:
        prefix = prefix or f"policy{self.agent_id}"
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def encode_obs(self, obs: np.ndarray) -> np.ndarray:
        return np.tanh(obs @ self.params["obs.W"].data + self.params["obs.b"].data)

    def encode_obs_t(self, obs: Tensor) -> Tensor:
        return nm.tanh(nm.add(nm.matmul(obs, self.params["obs.W"]), self.params["obs.b"]))

    def action_dist_t(self, obs: Tensor, intent_enc: Tensor, c_summary: Tensor,
                      action_feats: Tensor, adjacency: tuple[tuple[int, int], ...],
                      feasible: np.ndarray) -> Tensor:
        """Distribution over feasible actions (differentiable path)."""
        if not feasible.any():
            raise ExecutionError("no feasible action")
        p = self.params
        ctx_in = nm.concat([obs, intent_enc, c_summary])
        ctx = nm.tanh(nm.add(nm.matmul(ctx_in, p["ctx.W"]), p["ctx.b"]))
        feats = nm.tanh(nm.add(nm.matmul(action_feats, p["act.Wf"]),
                               nm.reshape(nm.matmul(ctx, p["act.Wh"]), (1, -1))))
        passed = nm.graph_message_pass(feats, adjacency,
                                       {"W_self": p["gmp.W_self"],
                                        "W_msg": p["gmp.W_msg"], "b": p["gmp.b"]})
        scores = nm.softplus(nm.reshape(nm.matmul(passed, p["score.w"]), (-1,)))
        logits = nm.log(nm.clip_min(scores, SCORE_FLOOR))
        gate = np.where(feasible, 0.0, -1e30)
        return nm.softmax(nm.add(logits, Tensor(gate)))

    def action_dist_np(self, obs: np.ndarray, intent_enc: np.ndarray,
                       c_summary: np.ndarray, action_feats: np.ndarray,
                       agg_matrix: np.ndarray, feasible: np.ndarray) -> np.ndarray:
        """Numpy mirror of :meth:`action_dist_t` for the rollout hot path.

        ``agg_matrix`` is the normalized in-neighbor averaging matrix of the
        action adjacency (see :func:`adjacency_matrix`).
        """
        if not feasible.any():
            raise ExecutionError("no feasible action")
        p = {k: v.data for k, v in self.params.items()}
        ctx_in = np.concatenate([obs, intent_enc, c_summary])
        ctx = np.tanh(ctx_in @ p["ctx.W"] + p["ctx.b"])
        feats = np.tanh(action_feats @ p["act.Wf"] + (ctx @ p["act.Wh"])[None, :])
        msgs = agg_matrix @ feats
        passed = np.tanh(feats @ p["gmp.W_self"] + msgs @ p["gmp.W_msg"] + p["gmp.b"])
        scores = np.logaddexp(0.0, (passed @ p["score.w"]).reshape(-1))
        logits = np.log(np.maximum(scores, SCORE_FLOOR))
        gated = logits + np.where(feasible, 0.0, -1e30)
        e = np.exp(gated - gated.max())
        return e / e.sum()

    def act(self, obs: np.ndarray, intent_enc: np.ndarray, c_hist: list[np.ndarray],
            action_feats: np.ndarray, adjacency: tuple[tuple[int, int], ...],
            feasible: np.ndarray, rng: np.random.Generator,
            c_width: int) -> tuple[int, np.ndarray]:
        """Sample one action; returns (action, distribution)."""
        c = c_hist[-1] if c_hist else np.zeros(c_width)
        probs = self.action_dist_np(obs, intent_enc, c, action_feats,
                                    adjacency_matrix(len(feasible), adjacency), feasible)
        probs = probs.copy()
        probs[~feasible] = 0.0
        probs = probs / probs.sum()
        action = int(rng.choice(len(probs), p=probs))
        return action, probs


class FeedbackApprox:
    """Feedback-conditioned policy approximation (the aux-loss target net)."""

    def __init__(self, obs_width: int, f_width: int, n_actions_max: int,
                 hidden: int, rng: np.random.Generator):
        p: dict[str, Tensor] = {}
        p["W1"] = _init(rng, obs_width + f_width, hidden)
        p["b1"] = Tensor(np.zeros(hidden), requires_grad=True)
        p["W2"] = _init(rng, hidden, n_actions_max)
        p["b2"] = Tensor(np.zeros(n_actions_max), requires_grad=True)
        self.params = p
        self.n_actions_max = n_actions_max

    def named_params(self, prefix: str = "approx") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def dist_t(self, obs: Tensor, f_enc: Tensor, feasible: np.ndarray) -> Tensor:
        h = nm.tanh(nm.add(nm.matmul(nm.concat([obs, f_enc]), self.params["W1"]),
                           self.params["b1"]))
        logits = nm.add(nm.matmul(h, self.params["W2"]), self.params["b2"])
        logits = nm.take(logits, slice(0, len(feasible)))
        gate = np.where(feasible, 0.0, -1e30)
        return nm.softmax(nm.add(logits, Tensor(gate)))


class CoordinationAggregator:
    """Single-head graph-attention pooling of per-agent encodings."""

    def __init__(self, enc_width: int, c_width: int, rng: np.random.Generator,
                 leaky_slope: float = 0.2):
        self.leaky_slope = leaky_slope
        p: dict[str, Tensor] = {}
        p["W"] = _init(rng, enc_width, c_width)
        p["a_src"] = _init(rng, c_width, 1, scale=0.5)
        p["a_dst"] = _init(rng, c_width, 1, scale=0.5)
        self.params = p

    def named_params(self, prefix: str = "aggregator") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def summarize_t(self, encodings: Tensor) -> Tensor:
        """Permutation-invariant summary of (N, enc_width) agent encodings."""
        p = self.params
        proj = nm.matmul(encodings, p["W"])  # (N, c)
        src = nm.reshape(nm.matmul(proj, p["a_src"]), (-1,))  # (N,)
        dst = nm.reshape(nm.matmul(proj, p["a_dst"]), (-1,))
        n = proj.data.shape[0]
        ones_col = Tensor(np.ones((n, 1)))
        scores = nm.add(nm.matmul(nm.reshape(src, (-1, 1)), nm.transpose(ones_col)),
                        nm.matmul(ones_col, nm.reshape(dst, (1, -1))))
        att = nm.softmax(nm.leaky_relu(scores, self.leaky_slope))  # rows normalized
        mixed = nm.tanh(nm.matmul(att, proj))
        return nm.mul(tsum_rows(mixed), 1.0 / n)

    def summarize(self, encodings: list[np.ndarray]) -> np.ndarray:
        """Numpy mirror of :meth:`summarize_t` for the rollout hot path."""
        if not encodings:
            raise CoverageError("summarize_coordination needs one encoding per live agent")
        p = {k: v.data for k, v in self.params.items()}
        proj = np.stack(encodings) @ p["W"]
        src = (proj @ p["a_src"]).reshape(-1)
        dst = (proj @ p["a_dst"]).reshape(-1)
        scores = src[:, None] + dst[None, :]
        scores = np.where(scores > 0.0, scores, self.leaky_slope * scores)
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att = e / e.sum(axis=-1, keepdims=True)
        mixed = np.tanh(att @ proj)
        return mixed.sum(axis=0) * (1.0 / len(encodings))


def tsum_rows(m: Tensor) -> Tensor:
    return nm.tsum(m, axis=0)


class Router:
    """Linear+softmax task router over sub-goal instruction features."""

    def __init__(self, d_width: int, n_agents: int, rng: np.random.Generator):
        self.params = {"W": _init(rng, d_width, n_agents),
                       "b": Tensor(np.zeros(n_agents), requires_grad=True)}

    def named_params(self, prefix: str = "router") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def weights_t(self, d: Tensor) -> Tensor:
        return nm.softmax(nm.add(nm.matmul(d, self.params["W"]), self.params["b"]))


def exe_loss(team_dists: list[Tensor], labels: list[int]) -> Tensor:
    """Sum over agents of the NLL their distribution assigns to the label."""
    if len(team_dists) != len(labels):
        raise TeamError(f"{len(team_dists)} agent outputs vs {len(labels)} labels")
    total: Tensor | None = None
    for dist, label in zip(team_dists, labels):
        nll = -nm.log(nm.clip_min(dist[label], SCORE_FLOOR))
        total = nll if total is None else total + nll
    return total if total is not None else Tensor(0.0)


def routing_loss(router: Router, d: np.ndarray | Tensor,
                 w_star: np.ndarray) -> tuple[Tensor, Tensor]:
    """Cross-entropy between predicted routing weights and the target w*."""
    w_star = np.asarray(w_star, dtype=np.float64)
    if np.min(w_star) < -1e-9 or abs(float(w_star.sum()) - 1.0) > 1e-9:
        raise TargetError("w* must be a distribution")
    w = router.weights_t(d if isinstance(d, Tensor) else Tensor(d))
    loss = -nm.tsum(Tensor(w_star) * nm.log(nm.clip_min(w, SCORE_FLOOR)))
    return loss, w


def aux_loss(policy_dist: Tensor, approx_dist: Tensor) -> Tensor:
    """Mean squared difference between the two probability vectors."""
    if policy_dist.data.shape != approx_dist.data.shape:
        raise nm.ShapeError(f"aux_loss shapes {policy_dist.data.shape} vs {approx_dist.data.shape}")
    diff = policy_dist - approx_dist
    return nm.tmean(diff * diff)


def total_loss(l_rl: Tensor, l_aux: Tensor, aux_weight: float) -> Tensor:
    return l_rl + l_aux * aux_weight if aux_weight != 0.0 else l_rl


def count_coordination_errors(claims: dict[int, int | None],
                              beliefs: dict[tuple[int, int], Belief],
                              exclusive: set[int]) -> tuple[int, tuple[tuple[int, int, int], ...]]:
    """E_t: ordered-pair belief mismatches plus exclusive double-claims.

    A belief with no unique peak (e.g. the untouched uniform prior) never
    matches.
    """
    agents = sorted(claims)
    errors = 0
    conflicts: list[tuple[int, int, int]] = []
    for i in agents:
        for j in agents:
            if i == j:
                continue
            mismatch = False
            if claims[j] is not None and (i, j) in beliefs:
                mismatch = belief_claim_estimate(beliefs[(i, j)]) != claims[j]
            double = (claims[i] is not None and claims[i] == claims[j]
                      and claims[i] in exclusive)
            if double and i < j:
                conflicts.append((i, j, claims[i]))
            if mismatch or double:
                errors += 1
    return errors, tuple(conflicts)


def produce_feedback(claims: dict[int, int | None],
                     beliefs: dict[tuple[int, int], Belief],
                     embeddings: dict[int, GroundedEmbedding],
                     encodings: list[np.ndarray],
                     aggregator: CoordinationAggregator,
                     exclusive: set[int],
                     stall_counts: dict[int, int],
                     tick: int,
                     replan_threshold: int = 3) -> FeedbackBundle:
    """Assemble the upstream bundle for this tick.

    E counts belief mismatches and exclusive double-claims over ordered
    agent pairs; U is the mean grounding entropy; R is the sub-goal with
    the longest active stall once it reaches ``replan_threshold``.
    """
    if len(encodings) != len(claims):
        raise CoverageError(f"{len(encodings)} encodings for {len(claims)} agents")
    errors, conflicts = count_coordination_errors(claims, beliefs, exclusive)
    u = float(np.mean([emb.entropy for emb in embeddings.values()])) if embeddings else 0.0
    r: int | None = None
    if stall_counts:
        sg, count = max(sorted(stall_counts.items()), key=lambda kv: kv[1])
        if count >= replan_threshold:
            r = sg
    c = aggregator.summarize(encodings)
    return FeedbackBundle(c=c, E=errors, U=u, R=r, tick=tick, conflicts=conflicts)


def encode_feedback(bundle: FeedbackBundle | None, c_width: int) -> np.ndarray:
    """Fixed-width numeric form of a bundle for downstream encoders."""
    if bundle is None:
        return np.zeros(c_width + 3)
    return np.concatenate([bundle.c,
                           [np.tanh(bundle.E / 4.0), np.tanh(bundle.U),
                            1.0 if bundle.R is not None else 0.0]])
