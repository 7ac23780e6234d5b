"""Intention-propagation channel.

Turns one agent's broadcast intention into teammate-specific messages
(four sharing modes), runs received messages through a stacked-GRU
recurrent encoder to maintain a belief about each sender, and trains the
encoder to maximize the coordination reward (cross-entropy to the true
goal and current sub-goal of each sender).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .intent import (
    Belief,
    Intention,
    IntentionCodec,
    IntentionMessage,
    belief_confidence,
)
from .numerics import Tensor
from .optim import AdamW

PROB_FLOOR = 1e-12


class RoutingError(ValueError):
    """A teammate assignment names an agent outside the team."""


class CodecError(ValueError):
    """Message payload width does not match the configured codec."""


class CoverageError(ValueError):
    """Beliefs and truths do not cover the same agent pairs."""


class PropagationMode(str, enum.Enum):
    NONE = "none"
    BASIC = "basic"
    SELECTIVE = "selective"
    FULL = "full"


@dataclass
class ChannelConfig:
    layers: int = 2
    hidden: int = 32
    mode: PropagationMode = PropagationMode.FULL
    broadcast_period: int = 1
    learned_messages: bool = False


def _init_weight(rng: np.random.Generator, *shape, scale: float | None = None) -> Tensor:
    if scale is None:
        scale = 1.0 / np.sqrt(shape[0])
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


class IntentionChannel:
    """Recurrent channel shared by the whole team.

    Hidden state is kept per (receiver, sender) pair by the caller; this
    class owns the parameters and the pure update/readout math.
    """

    def __init__(self, codec: IntentionCodec, config: ChannelConfig,
                 rng: np.random.Generator):
        self.codec = codec
        self.config = config
        self.n_agents = codec.n_agents
        self.in_width = codec.width + codec.n_agents  # payload ++ sender one-hot
        self.params: dict[str, Tensor] = {}
        h = config.hidden
        for layer in range(config.layers):
            k = self.in_width if layer == 0 else h
            for gate in ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc"):
                shape = (k, h) if gate.startswith("W") else ((h, h) if gate.startswith("U") else (h,))
                scale = 0.3 / np.sqrt(shape[0])
                self.params[f"gru{layer}.{gate}"] = (
                    Tensor(np.zeros(shape), requires_grad=True) if gate.startswith("b")
                    else _init_weight(rng, *shape, scale=scale))
        self.params["readout.Wg"] = _init_weight(rng, h, codec.n_goals, scale=0.05)
        self.params["readout.bg"] = Tensor(np.zeros(codec.n_goals), requires_grad=True)
        self.params["readout.Ws"] = _init_weight(rng, h, codec.n_subgoals, scale=0.05)
        self.params["readout.bs"] = Tensor(np.zeros(codec.n_subgoals), requires_grad=True)
        if config.learned_messages:
            self.params["msg.W"] = _init_weight(rng, codec.width, codec.width, scale=0.2)
            self.params["msg.b"] = Tensor(np.zeros(codec.width), requires_grad=True)

    def named_params(self, prefix: str = "channel") -> dict[str, Tensor]:
        return {f"{prefix}.{k}": v for k, v in self.params.items()}

    def _layer_params(self, layer: int) -> dict[str, Tensor]:
        return {g: self.params[f"gru{layer}.{g}"] for g in
                ("Wz", "Uz", "bz", "Wr", "Ur", "br", "Wc", "Uc", "bc")}

    # -- message emission -------------------------------------------------
    def emit_messages(self, intention: Intention, sender: int,
                      mode: PropagationMode, tick: int = 0,
                      selective_map: dict[int, tuple[int, ...]] | None = None
                      ) -> list[IntentionMessage]:
        """Produce this tick's outgoing messages for one sender.

        none: nothing.  basic: goal block to every teammate.  selective:
        goal block plus the recipient's assigned sub-goals, only to agents
        named in the assignment; callers that track assignment history can
        pass ``selective_map`` (recipient -> sub-goals to show) so that a
        recipient's view stays monotone across re-assignments.  full: the
        complete intention encoding to every teammate.
        """
        teammates = [a for a in range(self.n_agents) if a != sender]
        if mode is PropagationMode.NONE:
            return []
        out: list[IntentionMessage] = []
        if mode is PropagationMode.BASIC:
            payload = self.codec.encode_goal_only(intention)
            for r in teammates:
                out.append(IntentionMessage(sender, r, self._transform(payload), tick))
        elif mode is PropagationMode.SELECTIVE:
            by_recipient: dict[int, tuple[int, ...]] = {}
            if selective_map is None:
                grouped: dict[int, list[int]] = {}
                for sg, agent in intention.assignment.items():
                    if not (0 <= agent < self.n_agents):
                        raise RoutingError(f"assignment of subgoal {sg} names unknown agent {agent}")
                    if agent != sender:
                        grouped.setdefault(agent, []).append(sg)
                by_recipient = {r: tuple(sorted(v)) for r, v in grouped.items()}
            else:
                for r, subgoals in selective_map.items():
                    if not (0 <= r < self.n_agents):
                        raise RoutingError(f"selective map names unknown agent {r}")
                    if r != sender:
                        by_recipient[r] = tuple(sorted(subgoals))
            for r in sorted(by_recipient):
                payload = self.codec.encode_selected(intention, by_recipient[r])
                out.append(IntentionMessage(sender, r, self._transform(payload), tick))
        elif mode is PropagationMode.FULL:
            payload = self.codec.encode(intention)
            for r in teammates:
                out.append(IntentionMessage(sender, r, self._transform(payload), tick))
        return out

    def _transform(self, payload: np.ndarray) -> np.ndarray:
        if not self.config.learned_messages:
            return payload
        with nm.no_grad():
            t = nm.tanh(nm.add(nm.matmul(Tensor(payload), self.params["msg.W"]),
                               self.params["msg.b"]))
        return t.data

    # -- belief inference --------------------------------------------------
    def initial_state(self) -> list[np.ndarray]:
        return [np.zeros(self.config.hidden) for _ in range(self.config.layers)]

    def initial_belief(self, subject: int) -> Belief:
        g = np.full(self.codec.n_goals, 1.0 / self.codec.n_goals)
        s = np.full(self.codec.n_subgoals, 1.0 / self.codec.n_subgoals)
        return Belief(subject=subject, goal_probs=g, subgoal_probs=s,
                      confidence=belief_confidence(s))

    def _step_state_t(self, state: list[Tensor], payload: Tensor, sender: int) -> list[Tensor]:
        onehot = np.zeros(self.n_agents)
        onehot[sender] = 1.0
        x = nm.concat([payload, Tensor(onehot)])
        new_state = []
        for layer in range(self.config.layers):
            h = nm.gru_step(state[layer], x, self._layer_params(layer))
            new_state.append(h)
            x = h
        return new_state

    def _readout_t(self, h: Tensor) -> tuple[Tensor, Tensor]:
        goal_logits = nm.add(nm.matmul(h, self.params["readout.Wg"]), self.params["readout.bg"])
        sub_logits = nm.add(nm.matmul(h, self.params["readout.Ws"]), self.params["readout.bs"])
        return nm.softmax(goal_logits), nm.softmax(sub_logits)

    def infer_belief(self, message: IntentionMessage,
                     state: list[np.ndarray]) -> tuple[Belief, list[np.ndarray]]:
        """Advance the per-sender hidden state by one message and read out."""
        if message.payload.shape != (self.codec.width,):
            raise CodecError(f"payload width {message.payload.shape} != codec width {self.codec.width}")
        with nm.no_grad():
            state_t = self._step_state_t([Tensor(s) for s in state],
                                         Tensor(message.payload), message.sender)
            goal_p, sub_p = self._readout_t(state_t[-1])
        belief = Belief(subject=message.sender,
                        goal_probs=goal_p.data.copy(),
                        subgoal_probs=sub_p.data.copy(),
                        confidence=belief_confidence(sub_p.data))
        return belief, [s.data.copy() for s in state_t]

    @staticmethod
    def _sigmoid_np(x: np.ndarray) -> np.ndarray:
        return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                        np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    @staticmethod
    def _softmax_np(x: np.ndarray) -> np.ndarray:
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def infer_beliefs_batch(self, messages: list[IntentionMessage],
                            states: list[list[np.ndarray]]
                            ) -> tuple[list[Belief], list[list[np.ndarray]]]:
        """Batched :meth:`infer_belief` over independent (receiver, sender) pairs.

        Pure-numpy mirror of the training math (same formulas, bit-stable).
        """
        if not messages:
            return [], []
        for m in messages:
            if m.payload.shape != (self.codec.width,):
                raise CodecError(f"payload width {m.payload.shape} != codec width {self.codec.width}")
        onehots = np.zeros((len(messages), self.n_agents))
        for r, m in enumerate(messages):
            onehots[r, m.sender] = 1.0
        x = np.concatenate([np.stack([m.payload for m in messages]), onehots], axis=1)
        new_states: list[np.ndarray] = []
        for layer in range(self.config.layers):
            p = {k: v.data for k, v in self._layer_params(layer).items()}
            h = np.stack([s[layer] for s in states])
            z = self._sigmoid_np(x @ p["Wz"] + h @ p["Uz"] + p["bz"])
            r_gate = self._sigmoid_np(x @ p["Wr"] + h @ p["Ur"] + p["br"])
            cand = np.tanh(x @ p["Wc"] + (r_gate * h) @ p["Uc"] + p["bc"])
            h = (1.0 - z) * cand + z * h
            new_states.append(h)
            x = h
        goal_p = self._softmax_np(x @ self.params["readout.Wg"].data
                                  + self.params["readout.bg"].data)
        sub_p = self._softmax_np(x @ self.params["readout.Ws"].data
                                 + self.params["readout.bs"].data)
        beliefs = []
        out_states = []
        for r, m in enumerate(messages):
            beliefs.append(Belief(subject=m.sender,
                                  goal_probs=goal_p[r].copy(),
                                  subgoal_probs=sub_p[r].copy(),
                                  confidence=belief_confidence(sub_p[r])))
            out_states.append([s[r].copy() for s in new_states])
        return beliefs, out_states

    # -- training -----------------------------------------------------------
    def sequence_loss_t(self, stream: "MessageStream") -> Tensor:
        """Negative coordination reward of one (receiver, sender) stream."""
        state = [Tensor(np.zeros(self.config.hidden)) for _ in range(self.config.layers)]
        terms: list[Tensor] = []
        for payload, sender, (goal, subgoal) in zip(stream.payloads, stream.senders, stream.truths):
            state = self._step_state_t(state, Tensor(payload), sender)
            goal_p, sub_p = self._readout_t(state[-1])
            nll_g = -nm.log(nm.clip_min(goal_p[goal], PROB_FLOOR))
            nll_s = -nm.log(nm.clip_min(sub_p[subgoal], PROB_FLOOR))
            terms.append(nll_g + nll_s)
        if not terms:
            return Tensor(0.0)
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        return total * (1.0 / len(terms))

    def batched_loss_t(self, streams: list["MessageStream"]) -> Tensor:
        """Mean per-step NLL over streams, batching same-length groups."""
        buckets: dict[int, list[MessageStream]] = {}
        for s in streams:
            if s.payloads:
                buckets.setdefault(len(s.payloads), []).append(s)
        total: Tensor | None = None
        count = 0
        for length in sorted(buckets):
            group = buckets[length]
            b = len(group)
            states = [Tensor(np.zeros((b, self.config.hidden))) for _ in range(self.config.layers)]
            rows = np.arange(b)
            for t in range(length):
                onehots = np.zeros((b, self.n_agents))
                for r, s in enumerate(group):
                    onehots[r, s.senders[t]] = 1.0
                x = Tensor(np.concatenate(
                    [np.stack([s.payloads[t] for s in group]), onehots], axis=1))
                new_states = []
                for layer in range(self.config.layers):
                    h = nm.gru_step(states[layer], x, self._layer_params(layer))
                    new_states.append(h)
                    x = h
                states = new_states
                goal_p, sub_p = self._readout_t(states[-1])
                goals = np.array([s.truths[t][0] for s in group])
                subs = np.array([s.truths[t][1] for s in group])
                picked_g = nm.take(goal_p, (rows, goals))
                picked_s = nm.take(sub_p, (rows, subs))
                step = -nm.tsum(nm.log(nm.clip_min(picked_g, PROB_FLOOR))) \
                    - nm.tsum(nm.log(nm.clip_min(picked_s, PROB_FLOOR)))
                total = step if total is None else total + step
                count += b
        if total is None:
            return Tensor(0.0)
        return total * (1.0 / count)

    def train_step(self, batch: list["MessageStream"], opt: AdamW) -> float:
        if not batch:
            raise ValueError("train_channel requires a nonempty batch")
        total = self.batched_loss_t(batch)
        opt.zero_grad()
        nm.backward(total, params=list(self.params.values()))
        opt.step()
        return float(total.data)


@dataclass
class MessageStream:
    """One receiver's view of one sender: payload sequence plus truths."""

    payloads: list[np.ndarray]
    senders: list[int]
    truths: list[tuple[int, int]]  # (goal id, current subgoal id) per step


def emit_messages(channel: IntentionChannel, intention: Intention, sender: int,
                  mode: PropagationMode, tick: int = 0) -> list[IntentionMessage]:
    return channel.emit_messages(intention, sender, mode, tick)


def infer_belief(channel: IntentionChannel, message: IntentionMessage,
                 state: list[np.ndarray]) -> tuple[Belief, list[np.ndarray]]:
    return channel.infer_belief(message, state)


def coordination_reward(beliefs: dict[tuple[int, int], Belief],
                        truths: dict[int, tuple[int, int]]) -> float:
    """Mean over ordered pairs of log-likelihood the beliefs assign to truth.

    ``beliefs[(i, j)]`` is agent i's belief about agent j; ``truths[j]``
    is (goal id, current subgoal id).  Always <= 0, with equality iff all
    beliefs are one-hot on the truth.
    """
    agents = sorted(truths)
    total = 0.0
    count = 0
    for i in agents:
        for j in agents:
            if i == j:
                continue
            if (i, j) not in beliefs:
                raise CoverageError(f"missing belief for pair ({i}, {j})")
            b = beliefs[(i, j)]
            goal, sub = truths[j]
            total += np.log(max(float(b.goal_probs[goal]), PROB_FLOOR))
            total += np.log(max(float(b.subgoal_probs[sub]), PROB_FLOOR))
            count += 1
    if count == 0:
        raise CoverageError("no ordered pairs to score")
    return total / count


def train_channel(channel: IntentionChannel, batch: list[MessageStream],
                  steps: int = 1, lr: float = 1e-2,
                  weight_decay: float = 0.0) -> list[float]:
    """Run ``steps`` gradient steps descending -R_c; returns the loss trace."""
    opt = AdamW(channel.params, lr=lr, weight_decay=weight_decay)
    return [channel.train_step(batch, opt) for _ in range(steps)]


# -- toy belief task ------------------------------------------------------

def make_toy_belief_dataset(seed: int, n_sequences: int = 200, seq_len: int = 3,
                            codec: IntentionCodec | None = None
                            ) -> tuple[list[MessageStream], IntentionCodec]:
    """Two-goal learnability task: full-mode messages, goal/subgoal truths.

    Each sequence fixes one sender intention (goal in {0, 1}, two
    sub-goals per goal) and repeats its full encoding ``seq_len`` times.
    """
    codec = codec or IntentionCodec(n_goals=2, n_subgoals=4, n_agents=2)
    rng = np.random.default_rng(seed)
    streams: list[MessageStream] = []
    for _ in range(n_sequences):
        goal = int(rng.integers(2))
        subgoals = (0, 1) if goal == 0 else (2, 3)
        claim_pos = int(rng.integers(2))
        dist = np.zeros(2)
        dist[claim_pos] = 1.0
        intention = Intention(goal_id=goal, subgoals=subgoals,
                              next_subgoal_dist=dist,
                              assignment={subgoals[0]: 1, subgoals[1]: 0})
        payload = codec.encode(intention)
        claim = subgoals[claim_pos]
        streams.append(MessageStream(payloads=[payload.copy() for _ in range(seq_len)],
                                     senders=[0] * seq_len,
                                     truths=[(goal, claim)] * seq_len))
    return streams, codec


def belief_accuracy(channel: IntentionChannel, streams: list[MessageStream]) -> float:
    """Fraction of streams whose final goal-belief argmax matches the truth."""
    hits = 0
    for s in streams:
        state = channel.initial_state()
        belief = channel.initial_belief(s.senders[0])
        for payload, sender in zip(s.payloads, s.senders):
            msg = IntentionMessage(sender, 1 - sender if channel.n_agents > 1 else 0,
                                   payload, 0)
            belief, state = channel.infer_belief(msg, state)
        if int(np.argmax(belief.goal_probs)) == s.truths[-1][0]:
            hits += 1
    return hits / len(streams)
