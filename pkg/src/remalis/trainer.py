"""Episode loop, collective objective, and joint parameter updates.

``run_episode`` executes one tick loop: deliver messages and update
beliefs, prune and re-claim intentions, ground observations, act, step
the environment, assemble the feedback bundle, apply replans, then emit
the next round of messages.  ``update_all`` replays the collected
samples with gradients enabled and steps one AdamW optimizer per
component.  Everything is seeded and deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .channel import (
    ChannelConfig,
    IntentionChannel,
    MessageStream,
    PropagationMode,
)
from .checkpoint import load_params, save_params
from .envs import WorldInfo, alignment, coordination_time, make_env
from .envs.base import EnvStep
from .execution import (
    AgentPolicy,
    CoordinationAggregator,
    FeedbackApprox,
    FeedbackBundle,
    Router,
    aux_loss,
    encode_feedback,
    exe_loss,
    produce_feedback,
    routing_loss,
)
from .grounding import (
    ConfusionLedger,
    GroundingModule,
    apply_confusion_gate,
    confusion_loss,
    update_memory,
)
from .intent import (
    Intention,
    IntentionCodec,
    belief_claim_estimate,
    belief_to_record,
    intention_to_record,
)
from .numerics import Tensor
from .optim import AdamW
from .planning import Planner, PlannerConfig, ReplanTrigger, replan

LOSS_KEYS = ("L_RL", "L_aux", "L_exe", "L_com", "L_planner_NLL", "L_channel",
             "L_confusion", "decay")


class TrainingAborted(RuntimeError):
    """A component produced a NaN gradient; names the component."""


@dataclass
class RunConfig:
    """Run-scoped knobs; ``network_preset='paper'`` switches to published sizes."""

    seed: int = 0
    episodes: int = 200
    ticks: int = 30
    lr: float = 5e-3
    batch_size: int = 8
    weight_decay: float = 0.01
    warmup_frac: float = 1.0 / 15.0
    alpha: float = 0.5
    beta: float = 0.25
    lambda_aux: float = 0.5
    lambda_gate: float = 1.0
    gate_mode: str = "penalty"
    channel_mode: str = "full"
    channel_layers: int = 2
    channel_hidden: int = 32
    broadcast_period: int = 1
    learned_messages: bool = False
    planner_hidden: int = 32
    planner_graph_head: bool = True
    grounding_dim: int = 32
    c_width: int = 16
    policy_enc_width: int = 24
    env_kind: str = "traffic"
    tier: str = "easy"
    n_agents: int = 3
    feedback_enabled: bool = True
    replan_threshold: int = 3
    alignment_threshold: float = 0.6
    confusion_decay: float = 0.95
    sample_stride: int = 2
    discount: float = 0.97
    channel_steps_per_update: int = 4
    network_preset: str = "desk"

    def __post_init__(self):
        if self.lr < 0 or self.batch_size < 1 or self.episodes < 0:
            raise ValueError("rates and counts must be positive")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.network_preset == "paper":
            self.channel_layers = 4
            self.channel_hidden = 256
            self.planner_hidden = 512
            self.grounding_dim = 768
            self.lr = 1e-4
            self.batch_size = 32

    @property
    def mode(self) -> PropagationMode:
        return PropagationMode(self.channel_mode)


def knockout_feedback(config: RunConfig) -> RunConfig:
    """Bidirectional-feedback ablation: alpha = beta = 0 and c_t zeroed."""
    import dataclasses
    return dataclasses.replace(config, feedback_enabled=False, alpha=0.0, beta=0.0)


class Team:
    """All trainable components plus the run-scoped confusion ledger."""

    def __init__(self, config: RunConfig, info: WorldInfo):
        self.config = config
        self.info = info
        rng = np.random.default_rng(np.random.SeedSequence((config.seed, 17)))
        self.codec = IntentionCodec(n_goals=info.n_goals, n_subgoals=info.n_subgoals,
                                    n_agents=info.n_agents)
        self.channel = IntentionChannel(
            self.codec,
            ChannelConfig(layers=config.channel_layers, hidden=config.channel_hidden,
                          mode=config.mode, broadcast_period=config.broadcast_period,
                          learned_messages=config.learned_messages), rng)
        self.intent_feat_width = info.n_goals + 2 * info.n_subgoals
        f_width = config.c_width + 3
        planner_in = (info.obs_width + self.intent_feat_width
                      + config.grounding_dim + f_width)
        self.planner = Planner(planner_in, info.n_subgoals,
                               PlannerConfig(hidden=config.planner_hidden,
                                             node_feat_width=9,
                                             graph_head=config.planner_graph_head), rng)
        ground_in = info.obs_width + self.intent_feat_width + f_width
        self.grounding = GroundingModule(ground_in, config.c_width,
                                         len(info.concept_names),
                                         config.grounding_dim, rng)
        self.policies = [
            AgentPolicy(a, info.spec_tags[a], info.obs_width, self.intent_feat_width,
                        config.c_width, info.action_feat_width,
                        config.policy_enc_width, rng)
            for a in range(info.n_agents)]
        self.aggregator = CoordinationAggregator(config.policy_enc_width,
                                                 config.c_width, rng)
        d_width = len(next(iter(info.instruction_feats.values())))
        self.router = Router(d_width, info.n_agents, rng)
        self.approx = FeedbackApprox(info.obs_width, f_width, info.n_actions,
                                     config.policy_enc_width, rng)
        self.ledger = ConfusionLedger(len(info.concept_names),
                                      decay=config.confusion_decay)

    def named_params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.channel.named_params())
        out.update(self.planner.named_params())
        out.update(self.grounding.named_params())
        for pol in self.policies:
            out.update(pol.named_params())
        out.update(self.aggregator.named_params())
        out.update(self.router.named_params())
        out.update(self.approx.named_params())
        return out

    def param_groups(self) -> dict[str, dict[str, Tensor]]:
        exec_params: dict[str, Tensor] = {}
        for pol in self.policies:
            exec_params.update(pol.named_params())
        exec_params.update(self.aggregator.named_params())
        exec_params.update(self.approx.named_params())
        return {
            "channel": self.channel.named_params(),
            "planner": self.planner.named_params(),
            "grounding": self.grounding.named_params(),
            "execution": exec_params,
            "router": self.router.named_params(),
        }

    def param_hash(self) -> int:
        return hash(tuple((k, v.data.tobytes()) for k, v in sorted(self.named_params().items())))


def checkpoint(team: Team, path) -> None:
    save_params(path, {k: v.data for k, v in team.named_params().items()})


def restore(team: Team, path) -> None:
    loaded = load_params(path)
    params = team.named_params()
    missing = set(params) ^ set(loaded)
    if missing:
        raise KeyError(f"checkpoint records do not match team parameters: {sorted(missing)[:4]}")
    for k, t in params.items():
        if loaded[k].shape != t.data.shape:
            raise ValueError(f"shape mismatch for {k}: {loaded[k].shape} vs {t.data.shape}")
        t.data[...] = loaded[k]


# -- per-episode controller -------------------------------------------------

@dataclass
class TickRecord:
    tick: int
    reward: float
    alignment: float
    E: int
    U: float
    R: int | None
    actions: list[int]
    claims: dict[int, int | None]
    completed: list[int]
    belief_argmax: dict[str, int]
    intentions: list[dict]
    beliefs: list[dict]
    messages: list[tuple[int, int]]
    rejected: list[bool]
    confusion_events: list[tuple[int, int]]
    replans_applied: int = 0

    def to_json(self) -> dict:
        return {
            "tick": self.tick, "reward": self.reward, "alignment": self.alignment,
            "E": self.E, "U": self.U, "R": self.R, "actions": self.actions,
            "claims": {str(k): v for k, v in self.claims.items()},
            "completed": self.completed,
            "belief_argmax": self.belief_argmax,
            "intentions": self.intentions, "beliefs": self.beliefs,
            "messages": [list(m) for m in self.messages],
            "rejected": [bool(r) for r in self.rejected],
            "confusion_events": [list(e) for e in self.confusion_events],
            "replans_applied": self.replans_applied,
        }


@dataclass
class PolicySample:
    agent: int
    obs: np.ndarray
    intent_feat: np.ndarray
    c_used: np.ndarray
    f_enc: np.ndarray
    action_feats: np.ndarray
    feasible: np.ndarray
    action: int
    label: int
    tick: int


@dataclass
class GroundingSample:
    x: np.ndarray
    c_latest: np.ndarray | None
    concept: int


@dataclass
class PlannerRecord:
    x: np.ndarray
    node_feats: np.ndarray
    mask: np.ndarray
    label: int
    tick: int
    productive: bool = False


@dataclass
class EpisodeTrace:
    seed: int
    env_seed: int
    ticks: list[TickRecord] = field(default_factory=list)
    rewards: list[float] = field(default_factory=list)
    shaped_rewards: list[float] = field(default_factory=list)
    alignments: list[float] = field(default_factory=list)
    e_series: list[int] = field(default_factory=list)
    u_series: list[float] = field(default_factory=list)
    replans: int = 0
    channel_streams: dict = field(default_factory=dict)
    planner_records: list[PlannerRecord] = field(default_factory=list)
    policy_samples: list[PolicySample] = field(default_factory=list)
    grounding_samples: list[GroundingSample] = field(default_factory=list)
    router_samples: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    info: WorldInfo | None = None
    truncated_reason: str | None = None

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def e_sum(self) -> int:
        return int(sum(self.e_series))

    @property
    def u_mean(self) -> float:
        return float(np.mean(self.u_series)) if self.u_series else 0.0

    @property
    def mean_alignment(self) -> float:
        return float(np.mean(self.alignments)) if self.alignments else 0.0

    def coordination_tick(self, threshold: float) -> int | None:
        return coordination_time(self.alignments, threshold)


class TeamController:
    """Per-episode decision state: beliefs, evidence, claims, deferrals."""

    def __init__(self, team: Team, info: WorldInfo, config: RunConfig,
                 rng: np.random.Generator):
        self.team = team
        self.info = info
        self.config = config
        self.rng = rng
        n = info.n_agents
        self.intentions = {
            a: Intention(goal_id=info.goal_ids[a], subgoals=tuple(info.subgoal_sets[a]),
                         next_subgoal_dist=np.full(len(info.subgoal_sets[a]),
                                                   1.0 / len(info.subgoal_sets[a])),
                         assignment=dict(info.assignment[a]))
            for a in range(n)}
        self.claims: dict[int, int | None] = {a: None for a in range(n)}
        self.beliefs = {(i, j): team.channel.initial_belief(j)
                        for i in range(n) for j in range(n) if i != j}
        self.channel_states = {(i, j): team.channel.initial_state()
                               for i in range(n) for j in range(n) if i != j}
        self.evidence_seen: dict[tuple[int, int], set[int]] = {
            (i, j): set() for i in range(n) for j in range(n) if i != j}
        self.known_complete: dict[int, set[int]] = {a: set() for a in range(n)}
        self.deferred_until: dict[int, dict[int, int]] = {a: {} for a in range(n)}
        self.stall: dict[int, int] = {}
        self.inbox: list = []
        # assignment history per sender: recipient -> ever-assigned sub-goals;
        # keeps selective views monotone across replan re-assignments
        self.ever_assigned: dict[int, dict[int, set[int]]] = {
            a: {j: set() for j in range(n) if j != a} for a in range(n)}
        for a in range(n):
            for sg, j in info.assignment[a].items():
                if j != a:
                    self.ever_assigned[a][j].add(sg)
        k = info.n_subgoals
        pred_counts = np.zeros(k)
        pred_mat = np.zeros((k, k))
        for sg in range(k):
            for u in info.subgoal_graph.predecessors(sg):
                pred_mat[sg, u] = 1.0
                pred_counts[sg] += 1.0
        nz = pred_counts > 0
        pred_mat[nz] /= pred_counts[nz, None]
        self._pred_norm = pred_mat
        self._no_preds = ~nz
        self._excl_vec = np.zeros(k)
        self._excl_vec[sorted(info.exclusive)] = 1.0
        self._mine_vec = {}
        for a in range(n):
            v = np.zeros(k)
            v[list(info.subgoal_sets[a])] = 1.0
            self._mine_vec[a] = v

    # -- message intake ------------------------------------------------------
    def receive(self, trace_streams: dict) -> None:
        if not self.inbox:
            return
        msgs = sorted(self.inbox, key=lambda m: (m.recipient, m.sender))
        states = [self.channel_states[(m.recipient, m.sender)] for m in msgs]
        beliefs, new_states = self.team.channel.infer_beliefs_batch(msgs, states)
        codec = self.team.codec
        for m, b, st in zip(msgs, beliefs, new_states):
            key = (m.recipient, m.sender)
            self.beliefs[key] = b
            self.channel_states[key] = st
            stream = trace_streams.setdefault(key, MessageStream([], [], []))
            stream.payloads.append(m.payload.copy())
            stream.senders.append(m.sender)
            stream.truths.append((self.intentions[m.sender].goal_id,
                                  self._truth_claim(m.sender)))
            if not self.config.learned_messages:
                block = set(int(s) for s in
                            np.flatnonzero(m.payload[codec.subgoal_slice] != 0.0))
                seen = self.evidence_seen[key]
                dropped = seen - block
                if dropped:
                    self.known_complete[m.recipient].update(dropped)
                seen.update(block)
        self.inbox = []

    def _truth_claim(self, agent: int) -> int:
        c = self.claims[agent]
        if c is not None:
            return c
        i = self.intentions[agent]
        return i.subgoals[0] if i.subgoals else 0

    # -- knowledge ------------------------------------------------------------
    def note_completions(self, completed: np.ndarray) -> None:
        """Each agent observes completion of the sub-goals it owns."""
        for a in range(self.info.n_agents):
            for sg in self.info.subgoal_sets[a]:
                if completed[sg]:
                    self.known_complete[a].add(sg)

    def _deps_known(self, a: int, sg: int) -> bool:
        return all(u in self.known_complete[a]
                   for u in self.info.subgoal_graph.predecessors(sg))

    def _believed_taken_by_senior(self, a: int, sg: int) -> bool:
        for j in range(self.info.n_agents):
            if j >= a or (a, j) not in self.beliefs:
                continue
            if belief_claim_estimate(self.beliefs[(a, j)]) == sg:
                return True
        return False

    def _pending(self, a: int) -> list[int]:
        return [s for s in self.intentions[a].subgoals
                if s not in self.known_complete[a]]

    def prune(self, a: int) -> None:
        i = self.intentions[a]
        pending = self._pending(a)
        if len(pending) == len(i.subgoals):
            return
        if pending:
            probs = {s: p for s, p in zip(i.subgoals, i.next_subgoal_dist)}
            dist = np.array([probs[s] for s in pending])
            tot = dist.sum()
            dist = dist / tot if tot > 0 else np.full(len(pending), 1.0 / len(pending))
        else:
            dist = np.zeros(0)
        self.intentions[a] = Intention(
            goal_id=i.goal_id, subgoals=tuple(pending), next_subgoal_dist=dist,
            assignment={k: v for k, v in i.assignment.items() if k in pending})
        if self.claims[a] is not None and self.claims[a] not in pending:
            self.claims[a] = None

    # -- claim maintenance -------------------------------------------------------
    def eligibility(self, a: int, tick: int, for_new_claim: bool) -> np.ndarray:
        k = self.info.n_subgoals
        mask = np.zeros(k, dtype=bool)
        deferred = self.deferred_until[a]
        for sg in self._pending(a):
            if deferred.get(sg, -1) > tick:
                continue
            if not self._deps_known(a, sg):
                continue
            if (for_new_claim and sg in self.info.exclusive
                    and self._believed_taken_by_senior(a, sg)):
                continue
            mask[sg] = True
        return mask

    def node_features(self, a: int, tick: int) -> np.ndarray:
        info = self.info
        k = info.n_subgoals
        feats = np.zeros((k, 9))
        known = np.zeros(k)
        if self.known_complete[a]:
            known[sorted(self.known_complete[a])] = 1.0
        pending = self._pending(a)
        if pending:
            feats[pending, 0] = 1.0
        feats[:, 1] = known
        feats[:, 2] = self._mine_vec[a]
        dep_frac = self._pred_norm @ known
        dep_frac[self._no_preds] = 1.0
        feats[:, 3] = dep_frac
        feats[:, 4] = self._excl_vec
        for j in range(info.n_agents):
            if j != a:
                feats[int(np.argmax(self.beliefs[(a, j)].subgoal_probs)), 5] = 1.0
        for sg, until in self.deferred_until[a].items():
            if until > tick:
                feats[sg, 6] = 1.0
        if self.claims[a] is not None:
            feats[self.claims[a], 7] = 1.0
        feats[:, 8] = np.arange(k) / k  # node identity, lets a claiming convention form
        return feats

    def maintain(self, a: int, tick: int, x: np.ndarray,
                 node_feats: np.ndarray) -> PlannerRecord | None:
        """Hold a valid claim; otherwise transition via the planner."""
        info = self.info
        claim = self.claims[a]
        pending = self._pending(a)
        if not pending:
            self.claims[a] = None
            return None
        valid = (claim is not None and claim in pending
                 and self.deferred_until[a].get(claim, -1) <= tick
                 and self._deps_known(a, claim))
        if valid:
            self._set_dist_onehot(a, claim)
            return None
        mask = self.eligibility(a, tick, for_new_claim=True)
        record = None
        if mask.any():
            dist = self.team.planner.plan_next(x, node_feats, info.subgoal_graph, mask)
            new_claim = int(np.argmax(dist))
            record = PlannerRecord(x=x, node_feats=node_feats, mask=mask,
                                   label=new_claim, tick=tick)
        else:
            fallback = [s for s in pending
                        if self.deferred_until[a].get(s, -1) <= tick]
            new_claim = (fallback or pending)[0]
            self.stall.setdefault(new_claim, 0)
        self.claims[a] = new_claim
        self._set_dist_onehot(a, new_claim)
        return record

    def _set_dist_onehot(self, a: int, claim: int) -> None:
        i = self.intentions[a]
        dist = np.full(len(i.subgoals), 1e-12)
        dist[i.subgoals.index(claim)] = 1.0
        dist /= dist.sum()
        self.intentions[a] = Intention(goal_id=i.goal_id, subgoals=i.subgoals,
                                       next_subgoal_dist=dist,
                                       assignment=dict(i.assignment))

    # -- post-step bookkeeping -----------------------------------------------------
    def update_stalls(self, progressed: list[bool], completed: np.ndarray) -> None:
        for a, claim in self.claims.items():
            if claim is None:
                continue
            if completed[claim]:
                self.stall.pop(claim, None)
            elif progressed[a]:
                self.stall[claim] = 0
            else:
                self.stall[claim] = self.stall.get(claim, 0) + 1

    def apply_feedback(self, bundle: FeedbackBundle, tick: int) -> int:
        """Conflict deference plus replan triggers; returns replans applied."""
        replans = 0
        for (i, j, sg) in bundle.conflicts:
            self.deferred_until[j][sg] = self.info.horizon + 1
            if self.claims[j] == sg:
                self.claims[j] = None
        if bundle.R is not None:
            sg = bundle.R
            for a in range(self.info.n_agents):
                if self.claims[a] == sg:
                    trigger = ReplanTrigger(
                        subgoal=sg,
                        feasible=set(np.flatnonzero(self.eligibility(a, tick, False))),
                        team_load={t: sum(1 for v in self.intentions[a].assignment.values()
                                          if v == t) for t in range(self.info.n_agents)},
                        eligible_agents=tuple(t for t in range(self.info.n_agents)
                                              if t != a))
                    self.intentions[a] = replan(self.intentions[a], trigger,
                                                self.info.subgoal_graph)
                    new_helper = self.intentions[a].assignment.get(sg)
                    if new_helper is not None and new_helper != a:
                        self.ever_assigned[a][new_helper].add(sg)
                    self.deferred_until[a][sg] = tick + 2 * self.config.replan_threshold
                    self.claims[a] = None
                    self.stall[sg] = 0
                    replans += 1
        return replans


def intent_feature(codec: IntentionCodec, intention: Intention) -> np.ndarray:
    return codec.encode(intention)[:codec.n_goals + 2 * codec.n_subgoals]


def run_episode(env, team: Team, config: RunConfig, episode_seed: int,
                env_seed: int | None = None) -> EpisodeTrace:
    """Roll one episode; deterministic given (config, seeds, ledger state).

    The confusion ledger is read through a frozen snapshot; events are
    collected on the trace and applied by the trainer between episodes
    (single-writer phase), so repeated calls are bit-identical.
    """
    env_seed = episode_seed if env_seed is None else env_seed
    step, info = env.reset(env_seed)
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, episode_seed, 3)))
    ledger_view = team.ledger.snapshot()
    ctl = TeamController(team, info, config, rng)
    trace = EpisodeTrace(seed=episode_seed, env_seed=env_seed, info=info)
    codec = team.codec
    f_width = config.c_width + 3
    feedback: FeedbackBundle | None = None
    c_hist: list[np.ndarray] = []
    for sg, owner in sorted(info.specialization_map.items()):
        w_star = np.zeros(info.n_agents)
        w_star[owner] = 1.0
        trace.router_samples.append((info.instruction_feats[sg], w_star))
    for tick in range(config.ticks):
        ctl.note_completions(step.completed)
        ctl.receive(trace.channel_streams)
        for a in range(info.n_agents):
            ctl.prune(a)
        f_enc = encode_feedback(feedback if config.feedback_enabled else None, config.c_width)
        c_latest = feedback.c if (feedback is not None and config.feedback_enabled) else None
        # ground, then maintain claims (planner consumes the fresh embedding)
        intent_feats = {a: intent_feature(codec, ctl.intentions[a])
                        for a in range(info.n_agents)}
        xs = np.stack([np.concatenate([step.observations[a], intent_feats[a], f_enc])
                       for a in range(info.n_agents)])
        emb_list, logit_rows = team.grounding.ground_batch(xs, c_latest)
        embeddings = dict(enumerate(emb_list))
        events = []
        for a in range(info.n_agents):
            gated = apply_confusion_gate(logit_rows[a], ledger_view,
                                         config.lambda_gate, config.gate_mode)
            predicted = int(np.argmax(gated))
            true_c = step.true_concepts[a]
            if predicted != true_c:
                events.append((predicted, true_c))
            if tick % config.sample_stride == 0:
                trace.grounding_samples.append(GroundingSample(
                    x=xs[a], c_latest=c_latest.copy() if c_latest is not None else None,
                    concept=true_c))
        update_memory(ledger_view, events)
        for a in range(info.n_agents):
            node_feats = ctl.node_features(a, tick)
            x = np.concatenate([step.observations[a], intent_feats[a],
                                embeddings[a].e, f_enc])
            rec = ctl.maintain(a, tick, x, node_feats)
            if rec is not None:
                trace.planner_records.append(rec)
            intent_feats[a] = intent_feature(codec, ctl.intentions[a])
        # act
        actions = []
        c_used = c_hist[-1] if (c_hist and config.feedback_enabled) else np.zeros(config.c_width)
        for a in range(info.n_agents):
            action, _dist = team.policies[a].act(
                step.observations[a], intent_feats[a],
                [c_used], step.action_feats[a], info.action_adjacency,
                step.feasible[a], rng, config.c_width)
            actions.append(action)
            if tick % config.sample_stride == 0:
                trace.policy_samples.append(PolicySample(
                    agent=a, obs=step.observations[a], intent_feat=intent_feats[a],
                    c_used=c_used.copy(), f_enc=f_enc.copy(),
                    action_feats=step.action_feats[a], feasible=step.feasible[a],
                    action=action, label=step.correct_actions[a], tick=tick))
        pre_completed = step.completed.copy()
        out = env.step(actions, dict(ctl.claims))
        ctl.update_stalls(out.progressed, out.completed)
        # feedback assembly (measured even when the upstream path is disabled)
        encodings = [team.policies[a].encode_obs(step.observations[a])
                     for a in range(info.n_agents)]
        bundle = produce_feedback(dict(ctl.claims), ctl.beliefs, embeddings,
                                  encodings, team.aggregator, info.exclusive,
                                  dict(ctl.stall), tick,
                                  replan_threshold=config.replan_threshold)
        replans_now = 0
        if config.feedback_enabled:
            replans_now = ctl.apply_feedback(bundle, tick)
            trace.replans += replans_now
            c_hist.append(bundle.c)
        else:
            c_hist.append(np.zeros(config.c_width))
        remaining = {a: int(sum(1 for sg in info.subgoal_sets[a] if not out.completed[sg]))
                     for a in range(info.n_agents)}
        align = alignment(dict(ctl.claims), ctl.beliefs, pre_completed,
                          info.subgoal_graph, info.exclusive, remaining)
        shaped = out.reward - config.alpha * bundle.U - config.beta * bundle.E
        # mark productive transitions for planner likelihood training
        for rec in trace.planner_records:
            if rec.tick == tick:
                agent = next((a for a in range(info.n_agents)
                              if ctl.claims[a] == rec.label), None)
                if agent is not None and out.progressed[agent]:
                    rec.productive = True
        trace.rewards.append(out.reward)
        trace.shaped_rewards.append(shaped)
        trace.e_series.append(bundle.E)
        trace.u_series.append(bundle.U)
        trace.alignments.append(align)
        record = TickRecord(
            tick=tick, reward=out.reward, alignment=align, E=bundle.E, U=bundle.U,
            R=bundle.R, actions=list(actions), claims=dict(ctl.claims),
            completed=[int(i) for i in np.flatnonzero(pre_completed)],
            belief_argmax={f"{i},{j}": (-1 if (est := belief_claim_estimate(ctl.beliefs[(i, j)])) is None else est)
                           for (i, j) in sorted(ctl.beliefs)},
            intentions=[intention_to_record(ctl.intentions[a])
                        for a in range(info.n_agents)],
            beliefs=[belief_to_record(ctl.beliefs[(i, j)])
                     for (i, j) in sorted(ctl.beliefs)],
            messages=[], rejected=list(out.rejected),
            confusion_events=list(events), replans_applied=replans_now)
        # broadcast for next tick
        if config.mode is not PropagationMode.NONE and tick % config.broadcast_period == 0:
            for a in range(info.n_agents):
                if ctl.intentions[a].subgoals:
                    sel_map = None
                    if config.mode is PropagationMode.SELECTIVE:
                        pending = set(ctl.intentions[a].subgoals)
                        sel_map = {j: tuple(sorted(pending & ever))
                                   for j, ever in ctl.ever_assigned[a].items()}
                    msgs = team.channel.emit_messages(ctl.intentions[a], a,
                                                      config.mode, tick,
                                                      selective_map=sel_map)
                    ctl.inbox.extend(msgs)
                    record.messages.extend((m.sender, m.recipient) for m in msgs)
        trace.ticks.append(record)
        feedback = bundle
        step = out
        if out.done:
            if tick + 1 < config.ticks:
                trace.truncated_reason = "env_done"
            break
    return trace


# -- objectives and updates -----------------------------------------------------

def collective_objective(traces: list[EpisodeTrace], config: RunConfig,
                         decay_term: float = 0.0) -> tuple[float, dict[str, float]]:
    """Mean(alpha*U + beta*E) - mean return + weight-decay term."""
    if not traces:
        raise ValueError("collective_objective needs a nonempty batch")
    u_all = [u for t in traces for u in t.u_series]
    e_all = [e for t in traces for e in t.e_series]
    mean_u = float(np.mean(u_all)) if u_all else 0.0
    mean_e = float(np.mean(e_all)) if e_all else 0.0
    mean_return = float(np.mean([t.episode_return for t in traces]))
    breakdown = {
        "alpha_U": config.alpha * mean_u,
        "beta_E": config.beta * mean_e,
        "neg_return": -mean_return,
        "decay": decay_term,
    }
    return sum(breakdown.values()), breakdown


def make_optimizers(team: Team, config: RunConfig,
                    total_updates: int) -> dict[str, AdamW]:
    warmup = max(1, math.ceil(total_updates * config.warmup_frac)) if total_updates else 0
    return {name: AdamW(group, lr=config.lr, weight_decay=config.weight_decay,
                        warmup_steps=warmup)
            for name, group in team.param_groups().items()}


def _require_finite(name: str, value: float) -> float:
    if not np.isfinite(value):
        raise TrainingAborted(f"non-finite loss in component {name!r}")
    return value


def _component_step(name: str, loss_fn, opt: AdamW) -> float:
    """Forward + backward + optimizer step, aborting with the component name."""
    try:
        loss = loss_fn()
        opt.zero_grad()
        nm.backward(loss, params=list(opt.params.values()))
        value = _require_finite(name, float(loss.data))
        for k, p in opt.params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingAborted(f"NaN gradient in component {name!r} ({k})")
        opt.step()
        return value
    except nm.NumericError as exc:
        raise TrainingAborted(f"numeric failure in component {name!r}: {exc}") from exc


def planner_loss_t(traces: list[EpisodeTrace], team: Team) -> Tensor | None:
    """Mean NLL over productive realized claim transitions."""
    info = traces[0].info
    samples = [r for t in traces for r in t.planner_records if r.productive]
    if not samples:
        return None
    losses = []
    for r in samples:
        dist = team.planner.masked_dist_t(Tensor(r.x), Tensor(r.node_feats),
                                          info.subgoal_graph, r.mask)
        losses.append(-nm.log(nm.clip_min(dist[r.label], 1e-12)))
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def grounding_loss_t(traces: list[EpisodeTrace], team: Team,
                     config: RunConfig) -> tuple[Tensor, Tensor] | None:
    """Concept fit + alpha-weighted entropy + confusion regularizer.

    Returns (total loss, confusion component) or None without samples.
    """
    gsamples = [g for t in traces for g in t.grounding_samples]
    if not gsamples:
        return None
    xs = Tensor(np.stack([g.x for g in gsamples]))
    cs = Tensor(np.stack([g.c_latest if g.c_latest is not None
                          else np.zeros(config.c_width) for g in gsamples]))
    logits, sigma2, _e, _mu = team.grounding.forward_batch_t(xs, cs)
    probs = nm.softmax(logits)
    rows = np.arange(len(gsamples))
    labels = np.array([g.concept for g in gsamples])
    ce = -nm.tmean(nm.log(nm.clip_min(nm.take(probs, (rows, labels)), 1e-12)))
    entropy = nm.tmean(nm.log(sigma2)) * 0.5 + 0.5 * math.log(2 * math.pi * math.e)
    pairs = _confused_pairs(team.ledger)
    if pairs:
        l_conf = confusion_loss(probs, list(labels),
                                team.grounding.params["pairs.score"], pairs)
    else:
        l_conf = Tensor(0.0)
    return ce + entropy * config.alpha + l_conf, l_conf


def router_loss_t(traces: list[EpisodeTrace], team: Team,
                  cap: int = 64) -> Tensor | None:
    rsamples = [s for t in traces for s in t.router_samples]
    losses = []
    for d, w_star in rsamples[:cap]:
        loss, _w = routing_loss(team.router, d, w_star)
        losses.append(loss)
    if not losses:
        return None
    total = losses[0]
    for l in losses[1:]:
        total = total + l
    return total * (1.0 / len(losses))


def update_all(traces: list[EpisodeTrace], team: Team,
               opts: dict[str, AdamW], config: RunConfig) -> dict[str, float]:
    """One simultaneous optimization step per component; returns the loss report."""
    if not traces:
        raise ValueError("update_all needs a nonempty batch")
    report: dict[str, float] = {}

    # channel: descend -R_c as goal/subgoal cross-entropy
    streams = [s for t in traces for s in t.channel_streams.values() if s.payloads]
    report["L_channel"] = 0.0
    if streams:
        for _ in range(max(1, config.channel_steps_per_update)):
            report["L_channel"] = _component_step(
                "channel", lambda: team.channel.batched_loss_t(streams),
                opts["channel"])

    has_planner = any(r.productive for t in traces for r in t.planner_records)
    report["L_planner_NLL"] = (
        _component_step("planner", lambda: planner_loss_t(traces, team),
                        opts["planner"])
        if has_planner else 0.0)

    has_grounding = any(t.grounding_samples for t in traces)
    if has_grounding:
        conf_value = [0.0]

        def grounding_total():
            loss_gr, l_conf = grounding_loss_t(traces, team, config)
            conf_value[0] = float(l_conf.data)
            return loss_gr

        _component_step("grounding", grounding_total, opts["grounding"])
        report["L_confusion"] = _require_finite("grounding", conf_value[0])
    else:
        report["L_confusion"] = 0.0

    # execution: policy gradient + auxiliary regularization + supervised team loss
    parts: dict[str, float] = {}

    def execution_total():
        l_rl, l_aux, l_exe = _execution_losses(traces, team, config)
        parts["L_RL"] = float(l_rl.data)
        parts["L_aux"] = float(l_aux.data)
        parts["L_exe"] = float(l_exe.data)
        return l_rl + l_aux * config.lambda_aux + l_exe

    _component_step("execution", execution_total, opts["execution"])
    for key in ("L_RL", "L_aux", "L_exe"):
        report[key] = _require_finite("execution", parts[key])

    has_router = any(t.router_samples for t in traces)
    report["L_com"] = (
        _component_step("router", lambda: router_loss_t(traces, team), opts["router"])
        if has_router else 0.0)

    report["decay"] = sum(o.decay_value() for o in opts.values())
    return {k: report[k] for k in LOSS_KEYS}


def _confused_pairs(ledger: ConfusionLedger, cap: int = 12) -> list[tuple[int, int]]:
    pairs = []
    k = ledger.n_concepts
    for i in range(k):
        for j in range(i + 1, k):
            if ledger.M[i, j] > 0:
                pairs.append((ledger.M[i, j], (i, j)))
    pairs.sort(key=lambda p: (-p[0], p[1]))
    return [p for _, p in pairs[:cap]]


def _advantages(trace: EpisodeTrace, config: RunConfig) -> np.ndarray:
    returns = np.zeros(len(trace.shaped_rewards))
    g = 0.0
    for i in range(len(trace.shaped_rewards) - 1, -1, -1):
        g = trace.shaped_rewards[i] + config.discount * g
        returns[i] = g
    return returns - float(returns.mean())


def _policy_dist_batch_t(policy: AgentPolicy, samples: list[PolicySample],
                         info: WorldInfo) -> Tensor:
    """Batched action distributions (T, A) via block-diagonal message passing."""
    from .execution import adjacency_matrix
    p = policy.params
    t_n = len(samples)
    n_act = info.n_actions
    ctx_in = Tensor(np.stack([np.concatenate([s.obs, s.intent_feat, s.c_used])
                              for s in samples]))
    ctx = nm.tanh(nm.add(nm.matmul(ctx_in, p["ctx.W"]), p["ctx.b"]))
    af = Tensor(np.concatenate([s.action_feats for s in samples], axis=0))
    repeat = Tensor(np.kron(np.eye(t_n), np.ones((n_act, 1))))
    feats = nm.tanh(nm.add(nm.matmul(af, p["act.Wf"]),
                           nm.matmul(repeat, nm.matmul(ctx, p["act.Wh"]))))
    block = Tensor(np.kron(np.eye(t_n), adjacency_matrix(n_act, info.action_adjacency)))
    msgs = nm.matmul(block, feats)
    passed = nm.tanh(nm.add(nm.add(nm.matmul(feats, p["gmp.W_self"]),
                                   nm.matmul(msgs, p["gmp.W_msg"])), p["gmp.b"]))
    scores = nm.softplus(nm.reshape(nm.matmul(passed, p["score.w"]), (t_n, n_act)))
    logits = nm.log(nm.clip_min(scores, 1e-12))
    gate = np.stack([np.where(s.feasible, 0.0, -1e30) for s in samples])
    return nm.softmax(nm.add(logits, Tensor(gate)))


def _approx_dist_batch_t(approx: FeedbackApprox, samples: list[PolicySample],
                         n_act: int) -> Tensor:
    xs = Tensor(np.stack([np.concatenate([s.obs, s.f_enc]) for s in samples]))
    h = nm.tanh(nm.add(nm.matmul(xs, approx.params["W1"]), approx.params["b1"]))
    logits = nm.add(nm.matmul(h, approx.params["W2"]), approx.params["b2"])
    logits = nm.take(logits, (slice(None), slice(0, n_act)))
    gate = np.stack([np.where(s.feasible, 0.0, -1e30) for s in samples])
    return nm.softmax(nm.add(logits, Tensor(gate)))


def _execution_losses(traces: list[EpisodeTrace], team: Team,
                      config: RunConfig) -> tuple[Tensor, Tensor, Tensor]:
    info = traces[0].info
    zero = Tensor(0.0)
    adv_by_trace = [_advantages(t, config) for t in traces]
    rl_terms: list[Tensor] = []
    aux_terms: list[Tensor] = []
    exe_terms: list[Tensor] = []
    n_samples = 0
    for a in range(info.n_agents):
        samples: list[PolicySample] = []
        advs: list[float] = []
        for t, adv in zip(traces, adv_by_trace):
            for s in t.policy_samples:
                if s.agent == a:
                    samples.append(s)
                    advs.append(float(adv[min(s.tick, len(adv) - 1)]))
        if not samples:
            continue
        n_samples += len(samples)
        dist = _policy_dist_batch_t(team.policies[a], samples, info)
        rows = np.arange(len(samples))
        actions = np.array([s.action for s in samples])
        labels = np.array([s.label for s in samples])
        logp = nm.log(nm.clip_min(nm.take(dist, (rows, actions)), 1e-12))
        rl_terms.append(-nm.tsum(logp * Tensor(np.array(advs))))
        exe_terms.append(-nm.tsum(nm.log(nm.clip_min(nm.take(dist, (rows, labels)), 1e-12))))
        hat = _approx_dist_batch_t(team.approx, samples, info.n_actions)
        diff = dist - hat
        aux_terms.append(nm.tsum(diff * diff) * (1.0 / info.n_actions))

    def reduce(terms: list[Tensor]) -> Tensor:
        if not terms or n_samples == 0:
            return zero
        total = terms[0]
        for x in terms[1:]:
            total = total + x
        return total * (1.0 / n_samples)

    return reduce(rl_terms), reduce(aux_terms), reduce(exe_terms)


# -- run driver -------------------------------------------------------------------

@dataclass
class EpisodeMetrics:
    episode: int
    tick_count: int
    episode_return: float
    mean_alignment: float
    coordination_tick: int | None
    e_sum: int
    u_mean: float
    replans: int
    losses: dict[str, float] = field(default_factory=dict)


def build_team(config: RunConfig) -> tuple[Team, object]:
    env = make_env(config.env_kind, config.tier, n_agents=config.n_agents,
                   horizon=config.ticks)
    _step, info = env.reset(seed=0)
    return Team(config, info), env


def episode_seed_for(config: RunConfig, index: int) -> int:
    ss = np.random.SeedSequence((config.seed, index))
    return int(ss.generate_state(1)[0])


def apply_trace_confusion(team: Team, trace: EpisodeTrace) -> None:
    """Single-writer phase: fold an episode's confusion events into the ledger."""
    for rec in trace.ticks:
        update_memory(team.ledger, [tuple(e) for e in rec.confusion_events])


def run_training(config: RunConfig, keep_traces: bool = False
                 ) -> tuple[Team, list[EpisodeMetrics], list[EpisodeTrace]]:
    team, env = build_team(config)
    total_updates = max(1, config.episodes // config.batch_size)
    opts = make_optimizers(team, config, total_updates)
    metrics: list[EpisodeMetrics] = []
    kept: list[EpisodeTrace] = []
    buffer: list[EpisodeTrace] = []
    losses: dict[str, float] = {k: 0.0 for k in LOSS_KEYS}
    for ep in range(config.episodes):
        trace = run_episode(env, team, config, episode_seed_for(config, ep))
        apply_trace_confusion(team, trace)
        buffer.append(trace)
        if keep_traces:
            kept.append(trace)
        if len(buffer) >= config.batch_size:
            losses = update_all(buffer, team, opts, config)
            buffer = []
        metrics.append(EpisodeMetrics(
            episode=ep, tick_count=len(trace.ticks),
            episode_return=trace.episode_return,
            mean_alignment=trace.mean_alignment,
            coordination_tick=trace.coordination_tick(config.alignment_threshold),
            e_sum=trace.e_sum, u_mean=trace.u_mean, replans=trace.replans,
            losses=dict(losses)))
    return team, metrics, kept


def evaluate(team: Team, env, config: RunConfig, episodes: int,
             seed_offset: int = 1_000_000) -> list[EpisodeTrace]:
    """Frozen-parameter rollouts on held-out episode seeds."""
    return [run_episode(env, team, config, episode_seed_for(config, seed_offset + i))
            for i in range(episodes)]
