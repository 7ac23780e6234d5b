"""Symbol grounding with uncertainty and confusion tracking.

The grounding network contextualizes an agent's observation, intention
and latest coordination feedback into an embedding: a 2-layer
feed-forward encoder, cross-attention over a learned concept table, a
width-3 1-D convolution over the attended vector, and an additive
projection of the most recent coordination summary.  Gaussian heads
(mu, softplus sigma^2) model grounding uncertainty; concept logits are
gated by a decaying confusion matrix backed by an episodic memory.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor

LOG_2PI_E = math.log(2.0 * math.pi * math.e)


class CompositionError(ValueError):
    """compose_grounding got an empty member list."""


class EventError(ValueError):
    """A confusion event pairs a concept with itself."""


class ConfigError(ValueError):
    """Invalid gate configuration (negative strength or unknown mode)."""


class LossError(ValueError):
    """confusion_loss got zero pairs."""


@dataclass
class GroundedEmbedding:
    """Contextualized embedding with its Gaussian uncertainty heads."""

    e: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    entropy: float

    def __post_init__(self):
        if np.any(self.sigma2 <= 0):
            raise ValueError("sigma2 must be elementwise positive")


def grounding_entropy(sigma2: np.ndarray | GroundedEmbedding) -> float:
    """Differential entropy of Normal(mu, diag(sigma2)): 0.5*sum log(2*pi*e*s2)."""
    if isinstance(sigma2, GroundedEmbedding):
        sigma2 = sigma2.sigma2
    s2 = np.asarray(sigma2, dtype=np.float64)
    return 0.5 * float(np.sum(LOG_2PI_E + np.log(s2)))


@dataclass
class ConfusionLedger:
    """Instantaneous confusion matrix C plus the episodic memory M.

    C decays multiplicatively each update; M only ever grows.  Both stay
    symmetric with a zero diagonal.
    """

    n_concepts: int
    decay: float = 0.95
    C: np.ndarray = field(default=None)
    M: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.C is None:
            self.C = np.zeros((self.n_concepts, self.n_concepts))
        if self.M is None:
            self.M = np.zeros((self.n_concepts, self.n_concepts), dtype=np.int64)
        if not (0.0 <= self.decay <= 1.0):
            raise ValueError(f"decay must lie in [0, 1], got {self.decay}")

    def snapshot(self) -> "ConfusionLedger":
        return ConfusionLedger(self.n_concepts, self.decay, self.C.copy(), self.M.copy())


def update_memory(ledger: ConfusionLedger,
                  events: list[tuple[int, int]]) -> ConfusionLedger:
    """Apply one tick of confusion events.

    C is decayed then incremented symmetrically per event; M is
    incremented without decay.  Self-pairs are rejected.
    """
    k = ledger.n_concepts
    for (i, j) in events:
        if i == j:
            raise EventError(f"confusion event pairs concept {i} with itself")
        if not (0 <= i < k and 0 <= j < k):
            raise EventError(f"event ({i}, {j}) outside vocabulary of {k}")
    if events or ledger.decay != 1.0:
        ledger.C *= ledger.decay
    for (i, j) in events:
        ledger.C[i, j] += 1.0
        ledger.C[j, i] += 1.0
        ledger.M[i, j] += 1
        ledger.M[j, i] += 1
    return ledger


def apply_confusion_gate(logits: np.ndarray, ledger: ConfusionLedger,
                         gate_strength: float, mode: str = "penalty") -> np.ndarray:
    """Downweight concepts that carry confusion mass.

    ``penalty`` subtracts gate_strength * normalized row mass from the
    logits before the softmax (default).  ``rowmask`` is the literal
    multiplicative variant kept for comparison: probabilities are scaled
    by gate_strength times the row mass and renormalized.
    """
    if gate_strength < 0:
        raise ConfigError(f"gate strength must be >= 0, got {gate_strength}")
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != (ledger.n_concepts,):
        raise ValueError(f"logits shape {logits.shape} != vocabulary {ledger.n_concepts}")
    total = ledger.C.sum()
    row_mass = ledger.C.sum(axis=1) / max(1.0, total)
    if mode == "penalty":
        gated = logits - gate_strength * row_mass
        e = np.exp(gated - gated.max())
        return e / e.sum()
    if mode == "rowmask":
        e = np.exp(logits - logits.max())
        p = e / e.sum()
        scaled = p * (gate_strength * row_mass)
        s = scaled.sum()
        if s <= 0:
            return p
        return scaled / s
    raise ConfigError(f"unknown gate mode {mode!r}")


def compose_grounding(member_embeddings: list[np.ndarray], weights: np.ndarray,
                      params: dict) -> np.ndarray:
    """Weighted member sum passed through one graph message-pass layer."""
    if len(member_embeddings) == 0:
        raise CompositionError("compose_grounding needs at least one member")
    if len(member_embeddings) != len(weights):
        raise ValueError("member/weight length mismatch")
    acc = np.zeros_like(np.asarray(member_embeddings[0], dtype=np.float64))
    for w, m in zip(weights, member_embeddings):
        acc = acc + float(w) * np.asarray(m, dtype=np.float64)
    with nm.no_grad():
        out = nm.graph_message_pass(Tensor(acc.reshape(1, -1)), [], params)
    return out.data[0].copy()


def confusion_loss(probs: Tensor, labels: list[int], pair_scores: Tensor,
                   pairs: list[tuple[int, int]]) -> Tensor:
    """Attention-weighted symmetric misgrounding mass over concept pairs.

    ``probs`` are per-sample concept distributions (B, K) with true labels
    ``labels``.  Conf(i, j) is the average probability mass put on j when
    the true concept is i and vice versa; pair attention is the softmax of
    ``pair_scores`` over ``pairs``.
    """
    if not pairs:
        raise LossError("confusion_loss needs at least one concept pair")
    labels_arr = np.asarray(labels)
    scores = nm.stack([pair_scores[(i, j)] for (i, j) in pairs])
    att = nm.softmax(scores)
    terms: list[Tensor] = []
    for idx, (i, j) in enumerate(pairs):
        sides: list[Tensor] = []
        for (true_c, other) in ((i, j), (j, i)):
            rows = np.flatnonzero(labels_arr == true_c)
            if rows.size:
                mass = nm.take(probs, (rows, np.full(rows.size, other)))
                sides.append(nm.tsum(mass) * (1.0 / rows.size))
        if sides:
            conf = sides[0] if len(sides) == 1 else (sides[0] + sides[1]) * 0.5
        else:
            conf = Tensor(0.0)
        terms.append(att[idx] * conf)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def uncertainty(x: Tensor | np.ndarray, params: dict,
                rng: np.random.Generator) -> tuple[Tensor, Tensor, np.ndarray]:
    """Gaussian heads over an encoding plus one reparameterized sample.

    sigma^2 goes through softplus so it is strictly positive; the sample
    is mu + sigma * eps with eps drawn from the run's generator.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    mu = nm.add(nm.matmul(x, params["W_mu"]), params["b_mu"])
    sigma2 = nm.softplus(nm.add(nm.matmul(x, params["W_sig"]), params["b_sig"]))
    eps = rng.standard_normal(mu.data.shape)
    z = mu.data + np.sqrt(sigma2.data) * eps
    return mu, sigma2, z


def _init(rng: np.random.Generator, *shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class GroundingModule:
    """Parameter bundle and forward pass for grounding one agent view."""

    def __init__(self, in_width: int, c_width: int, n_concepts: int, d_g: int,
                 rng: np.random.Generator):
        self.in_width = in_width
        self.c_width = c_width
        self.n_concepts = n_concepts
        self.d_g = d_g
        p: dict[str, Tensor] = {}
        p["enc.W1"] = _init(rng, in_width, d_g)
        p["enc.b1"] = Tensor(np.zeros(d_g), requires_grad=True)
        p["enc.W2"] = _init(rng, d_g, d_g)
        p["enc.b2"] = Tensor(np.zeros(d_g), requires_grad=True)
        p["concepts.V"] = _init(rng, n_concepts, d_g, scale=0.5)
        p["conv.w"] = Tensor(np.array([0.1, 0.8, 0.1]), requires_grad=True)
        p["conv.b"] = Tensor(np.zeros(1), requires_grad=True)
        p["feedback.P"] = Tensor(np.zeros((c_width, d_g)), requires_grad=True)
        p["head.W_mu"] = _init(rng, d_g, d_g, scale=0.1)
        p["head.b_mu"] = Tensor(np.zeros(d_g), requires_grad=True)
        p["head.W_sig"] = Tensor(np.zeros((d_g, d_g)), requires_grad=True)
        p["head.b_sig"] = Tensor(np.zeros(d_g), requires_grad=True)
        p["concept_head.b"] = Tensor(np.zeros(n_concepts), requires_grad=True)
        p["pairs.score"] = Tensor(np.zeros((n_concepts, n_concepts)), requires_grad=True)
        self.params = p

    def named_params(self, prefix: str = "grounding") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def _uncertainty_params(self) -> dict:
        return {"W_mu": self.params["head.W_mu"], "b_mu": self.params["head.b_mu"],
                "W_sig": self.params["head.W_sig"], "b_sig": self.params["head.b_sig"]}

    def forward_t(self, x: Tensor, c_latest: np.ndarray | None,
                  rng: np.random.Generator) -> tuple[Tensor, Tensor, Tensor, Tensor, np.ndarray]:
        """Differentiable path: returns (e, concept logits, mu, sigma2, z)."""
        p = self.params
        h = nm.tanh(nm.add(nm.matmul(x, p["enc.W1"]), p["enc.b1"]))
        h = nm.tanh(nm.add(nm.matmul(h, p["enc.W2"]), p["enc.b2"]))
        attended = nm.cross_attention(h, p["concepts.V"], p["concepts.V"])
        e = nm.conv1d_width3(attended, p["conv.w"], p["conv.b"])
        if c_latest is not None:
            e = nm.add(e, nm.matmul(Tensor(np.asarray(c_latest, dtype=np.float64)),
                                    p["feedback.P"]))
        mu, sigma2, z = uncertainty(h, self._uncertainty_params(), rng)
        logits = nm.add(nm.matmul(p["concepts.V"], e), p["concept_head.b"])
        return e, logits, mu, sigma2, z

    def forward_batch_t(self, xs: Tensor, c_latest: Tensor | None
                        ) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Batched path over (B, in_width) inputs.

        Returns (concept logits (B, K), sigma2, embeddings, mu), each (B, d_g)
        except the logits.
        """
        p = self.params
        h = nm.tanh(nm.add(nm.matmul(xs, p["enc.W1"]), p["enc.b1"]))
        h = nm.tanh(nm.add(nm.matmul(h, p["enc.W2"]), p["enc.b2"]))
        scale = 1.0 / np.sqrt(self.d_g)
        scores = nm.mul(nm.matmul(h, nm.transpose(p["concepts.V"])), scale)
        att = nm.softmax(scores)
        attended = nm.matmul(att, p["concepts.V"])  # (B, d_g)
        b, n = attended.data.shape
        zeros = Tensor(np.zeros((b, 1)))
        xp = nm.concat([zeros, attended, zeros], axis=1)
        w = p["conv.w"]
        e = nm.add(nm.add(nm.mul(nm.take(xp, (slice(None), slice(0, n))), nm.take(w, 0)),
                          nm.mul(nm.take(xp, (slice(None), slice(1, n + 1))), nm.take(w, 1))),
                   nm.mul(nm.take(xp, (slice(None), slice(2, n + 2))), nm.take(w, 2)))
        e = nm.add(e, p["conv.b"])
        if c_latest is not None:
            e = nm.add(e, nm.matmul(c_latest, p["feedback.P"]))
        mu = nm.add(nm.matmul(h, p["head.W_mu"]), p["head.b_mu"])
        sigma2 = nm.softplus(nm.add(nm.matmul(h, p["head.W_sig"]), p["head.b_sig"]))
        logits = nm.add(nm.matmul(e, nm.transpose(p["concepts.V"])), p["concept_head.b"])
        return logits, sigma2, e, mu

    def ground(self, state_vec: np.ndarray, intention_enc: np.ndarray,
               feedback_enc: np.ndarray, c_latest: np.ndarray | None,
               rng: np.random.Generator) -> tuple[GroundedEmbedding, np.ndarray]:
        """Rollout path: embedding with uncertainty plus raw concept logits.

        ``c_latest`` is the most recent coordination summary; None (empty
        feedback history) contributes exactly zero.
        """
        x = np.concatenate([state_vec, intention_enc, feedback_enc])
        if x.shape != (self.in_width,):
            raise nm.ShapeError(f"grounding input width {x.shape} != {self.in_width}")
        with nm.no_grad():
            e, logits, mu, sigma2, _z = self.forward_t(Tensor(x), c_latest, rng)
        emb = GroundedEmbedding(e=e.data.copy(), mu=mu.data.copy(),
                                sigma2=sigma2.data.copy(),
                                entropy=grounding_entropy(sigma2.data))
        return emb, logits.data.copy()

    def ground_batch(self, xs: np.ndarray, c_latest: np.ndarray | None
                     ) -> tuple[list[GroundedEmbedding], np.ndarray]:
        """Rollout path batched over agents: (B, in_width) -> embeddings, logits.

        Numpy mirror of :meth:`forward_batch_t` (same formulas).
        """
        p = {k: v.data for k, v in self.params.items()}
        h = np.tanh(xs @ p["enc.W1"] + p["enc.b1"])
        h = np.tanh(h @ p["enc.W2"] + p["enc.b2"])
        scores = (h @ p["concepts.V"].T) * (1.0 / np.sqrt(self.d_g))
        ex = np.exp(scores - scores.max(axis=-1, keepdims=True))
        att = ex / ex.sum(axis=-1, keepdims=True)
        attended = att @ p["concepts.V"]
        b, n = attended.shape
        xp = np.concatenate([np.zeros((b, 1)), attended, np.zeros((b, 1))], axis=1)
        w = p["conv.w"]
        e = (xp[:, 0:n] * w[0] + xp[:, 1:n + 1] * w[1] + xp[:, 2:n + 2] * w[2]) + p["conv.b"]
        if c_latest is not None:
            e = e + np.broadcast_to(c_latest, (b, self.c_width)) @ p["feedback.P"]
        mu = h @ p["head.W_mu"] + p["head.b_mu"]
        sigma2 = np.logaddexp(0.0, h @ p["head.W_sig"] + p["head.b_sig"])
        logits = e @ p["concepts.V"].T + p["concept_head.b"]
        embs = []
        for i in range(b):
            s2 = sigma2[i].copy()
            embs.append(GroundedEmbedding(e=e[i].copy(), mu=mu[i].copy(),
                                          sigma2=s2, entropy=grounding_entropy(s2)))
        return embs, logits.copy()
