"""Traffic-grid signal control world.

Intersections hold four approach queues; a phase serves two opposite
approaches.  Vehicles arrive per entry edge at tier-dependent rates,
served vehicles leave the network, and the team reward is the negative
total queue normalized by lane count.  Sub-goal work: a claimed,
dependency-satisfied sub-goal progresses each tick, faster when the
claiming agent holds its target intersection on the needed phase.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .base import (
    ConfigError,
    EnvStep,
    Mission,
    WorldInfo,
    generate_mission,
    instruction_features,
    n_subgoal_slots,
    specialization_for,
    N_GOALS,
)

LANES_PER_INTERSECTION = 4

TIERS = {
    # rows, cols, phases, rate model
    "easy": dict(rows=3, cols=3, phases=4, rate_lo=0.5, rate_hi=0.5),
    "medium": dict(rows=5, cols=5, phases=12, rate_lo=0.5, rate_hi=2.0),
    "hard": dict(rows=8, cols=8, phases=16, rate_lo=0.1, rate_hi=3.0),
    "hell": dict(rows=0, cols=0, phases=28, rate_lo=0.2, rate_hi=1.0, n_irregular=108,
                 spike_rate=6.0, spike_prob=0.05),
}

CONCEPTS = ("light_ns", "light_ew", "moderate_ns", "moderate_ew", "heavy_ns", "heavy_ew")
SPEC_TAGS = ("flow_control", "phase_timing", "boundary_sync", "surge_response")


@dataclass
class TrafficConfig:
    tier: str = "easy"
    n_agents: int = 3
    horizon: int = 30
    service_rate: int = 2
    work_required: int = 6
    blockage_prob: float = 0.4
    blockage_len: int = 8

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ConfigError(f"unknown traffic tier {self.tier!r}")
        if self.n_agents < 2:
            raise ConfigError("traffic world needs at least 2 agents")
        if self.horizon < 1 or self.service_rate < 1 or self.work_required < 1:
            raise ConfigError("horizon, service_rate and work_required must be positive")

    @property
    def n_intersections(self) -> int:
        t = TIERS[self.tier]
        return t.get("n_irregular") or t["rows"] * t["cols"]

    @property
    def phases(self) -> int:
        return TIERS[self.tier]["phases"]


class TrafficWorld:
    """Seeded, deterministic traffic simulator."""

    def __init__(self, config: TrafficConfig):
        self.config = config
        self.tier = TIERS[config.tier]
        self.n_agents = config.n_agents
        self.mission: Mission | None = None
        self.info: WorldInfo | None = None

    # -- world generation ---------------------------------------------------
    def reset(self, seed: int) -> tuple[EnvStep, WorldInfo]:
        cfg = self.config
        self.rng = np.random.default_rng(seed)
        self.tick = 0
        n_inter = cfg.n_intersections
        self.queues = np.zeros((n_inter, LANES_PER_INTERSECTION), dtype=np.int64)
        self.phases_now = np.zeros(n_inter, dtype=np.int64)
        self.cum_arrived = 0
        self.cum_served = 0
        # contiguous regions of intersections per agent
        bounds = np.linspace(0, n_inter, self.n_agents + 1).astype(int)
        self.regions = [list(range(bounds[a], bounds[a + 1])) for a in range(self.n_agents)]
        self.region_pad = max(len(r) for r in self.regions)
        self.mission = generate_mission(self.n_agents, self.rng)
        m = self.mission
        # per-subgoal target intersection and needed phase
        self.target = {}
        self.needed_phase = {}
        n_private = self.n_agents * 4
        for sg in range(m.n_subgoals):
            if sg < n_private:
                region = self.regions[sg // 4]
                self.target[sg] = region[sg % len(region)]
            else:
                a, _b = m.shared_boundary[sg]
                self.target[sg] = self.regions[a][-1]
            self.needed_phase[sg] = int(self.rng.integers(cfg.phases))
        # blockage windows per agent: one private subgoal may stall mid-episode
        self.block_until = {}
        self.block_from = {}
        for a in range(self.n_agents):
            if self.rng.random() < cfg.blockage_prob:
                sg = int(self.rng.choice(m.subgoal_sets[a][:3]))
                start = int(self.rng.integers(4, max(5, cfg.horizon // 2)))
                self.block_from[sg] = start
                self.block_until[sg] = start + cfg.blockage_len
        # heterogeneous task sizes blur elapsed-time as a progression signal
        self.work_required = {sg: int(self.rng.integers(max(2, cfg.work_required - 2),
                                                        cfg.work_required + 3))
                              for sg in range(m.n_subgoals)}
        self.progress = np.zeros(m.n_subgoals, dtype=np.int64)
        self.completed = np.zeros(m.n_subgoals, dtype=bool)
        self.last_claims: dict[int, int | None] = {a: None for a in range(self.n_agents)}
        self._phase_rate = self._sample_rates()
        self.info = self._world_info()
        return self._make_step(reward=0.0, progressed=[False] * self.n_agents,
                               rejected=[False] * self.n_agents), self.info

    def _world_info(self) -> WorldInfo:
        m = self.mission
        cfg = self.config
        p = cfg.phases
        adjacency = tuple((a, (a + 1) % p) for a in range(p)) + \
            tuple(((a + 1) % p, a) for a in range(p))
        obs_width = (self.region_pad + LANES_PER_INTERSECTION + 2 * p
                     + 2 + N_GOALS + 1)
        return WorldInfo(
            n_agents=self.n_agents, n_goals=N_GOALS, n_subgoals=m.n_subgoals,
            subgoal_graph=m.graph, goal_ids=dict(m.goal_ids),
            subgoal_sets={a: tuple(m.subgoal_sets[a]) for a in m.subgoal_sets},
            assignment={a: dict(m.assignment[a]) for a in m.assignment},
            exclusive=set(m.exclusive), owners=dict(m.owners),
            specialization_map=specialization_for(m),
            spec_tags=SPEC_TAGS[:self.n_agents] if self.n_agents <= len(SPEC_TAGS)
            else tuple(f"domain{a}" for a in range(self.n_agents)),
            concept_names=CONCEPTS,
            instruction_feats=instruction_features(m, self.n_agents),
            n_actions=p, action_adjacency=adjacency, action_feat_width=4,
            obs_width=obs_width, horizon=cfg.horizon)

    def _sample_rates(self) -> np.ndarray:
        """Per-entry-edge arrival rate for the current tick."""
        t = self.tier
        n = self.config.n_intersections
        lo, hi = t["rate_lo"], t["rate_hi"]
        if self.config.tier == "easy":
            rates = np.full(n, lo)
        elif self.config.tier == "medium":
            mid = 0.5 * (lo + hi)
            amp = 0.5 * (hi - lo)
            wave = mid + amp * np.sin(2 * np.pi * (self.tick / 12.0)
                                      + np.arange(n) * 0.7)
            rates = np.clip(wave, lo, hi)
        elif self.config.tier == "hard":
            rates = self.rng.uniform(lo, hi, size=n)
        else:  # hell: spiking
            rates = self.rng.uniform(lo, hi, size=n)
            spikes = self.rng.random(n) < t["spike_prob"]
            rates[spikes] = t["spike_rate"]
        return rates

    # -- dynamics -------------------------------------------------------------
    def _served_lanes(self, phase: int) -> tuple[int, int]:
        return (phase % LANES_PER_INTERSECTION,
                (phase + 2) % LANES_PER_INTERSECTION)

    def step(self, actions: list[int], claims: dict[int, int | None]) -> EnvStep:
        cfg = self.config
        m = self.mission
        self.tick += 1
        self.last_claims = dict(claims)
        rejected = [False] * self.n_agents
        # apply phase choices to each claim's target (or the region head)
        for a, action in enumerate(actions):
            if not (0 <= action < cfg.phases):
                rejected[a] = True
                continue
            target = self._agent_target(a, claims.get(a))
            self.phases_now[target] = action
        # arrivals (each lane is an entry edge)
        self._phase_rate = self._sample_rates()
        arrivals = self.rng.poisson(self._phase_rate[:, None] / LANES_PER_INTERSECTION,
                                    size=self.queues.shape)
        self.queues += arrivals
        self.cum_arrived += int(arrivals.sum())
        # service
        for k in range(self.config.n_intersections):
            for lane in self._served_lanes(int(self.phases_now[k])):
                served = min(cfg.service_rate, int(self.queues[k, lane]))
                self.queues[k, lane] -= served
                self.cum_served += served
        # sub-goal work
        progressed = [False] * self.n_agents
        claimed_excl: dict[int, int] = {}
        for a in sorted(claims):
            sg = claims[a]
            if sg is not None and sg in m.exclusive:
                claimed_excl.setdefault(sg, a)
        for a in sorted(claims):
            sg = claims[a]
            if sg is None or self.completed[sg]:
                continue
            if a not in m.owners.get(sg, ()):
                continue
            if any(not self.completed[u] for u in m.graph.predecessors(sg)):
                continue
            if sg in m.exclusive and claimed_excl.get(sg) != a:
                continue
            if self.block_from.get(sg, cfg.horizon + 1) <= self.tick < self.block_until.get(sg, -1):
                continue
            gain = 1
            if actions[a] == self.needed_phase[sg]:
                gain += 1
            self.progress[sg] += gain
            progressed[a] = True
            if self.progress[sg] >= self.work_required[sg]:
                self.completed[sg] = True
        reward = -float(self.queues.sum()) / (self.config.n_intersections * LANES_PER_INTERSECTION)
        done = self.tick >= cfg.horizon or bool(self.completed.all())
        return self._make_step(reward=reward, progressed=progressed, rejected=rejected,
                               done=done)

    def _agent_target(self, agent: int, claim: int | None) -> int:
        if claim is not None and agent in self.mission.owners.get(claim, ()):
            return self.target[claim]
        return self.regions[agent][0]

    # -- outputs ---------------------------------------------------------------
    def _make_step(self, reward: float, progressed: list[bool], rejected: list[bool],
                   done: bool = False) -> EnvStep:
        obs, concepts, labels, feats, feas = [], [], [], [], []
        for a in range(self.n_agents):
            o, c, y, f = self._agent_view(a)
            obs.append(o)
            concepts.append(c)
            labels.append(y)
            feats.append(f)
            feas.append(np.ones(self.config.phases, dtype=bool))
        return EnvStep(observations=obs, true_concepts=concepts, correct_actions=labels,
                       action_feats=feats, feasible=feas, reward=reward,
                       completed=self.completed.copy(), progressed=progressed,
                       rejected=rejected, done=done)

    def _agent_view(self, a: int) -> tuple[np.ndarray, int, int, np.ndarray]:
        cfg = self.config
        m = self.mission
        region = self.regions[a]
        claim = self.last_claims.get(a)
        target = self._agent_target(a, claim)
        region_q = np.zeros(self.region_pad)
        region_q[:len(region)] = self.queues[region].sum(axis=1) / 20.0
        lane_q = self.queues[target] / 10.0
        needed = np.zeros(cfg.phases)
        blocked = 0.0
        prog = 0.0
        if claim is not None and a in m.owners.get(claim, ()):
            needed[self.needed_phase[claim]] = 1.0
            prog = self.progress[claim] / self.work_required[claim]
            if self.block_from.get(claim, cfg.horizon + 1) <= self.tick + 1 < self.block_until.get(claim, -1):
                blocked = 1.0
        current = np.zeros(cfg.phases)
        current[int(self.phases_now[target])] = 1.0
        goal = np.zeros(N_GOALS)
        goal[m.goal_ids[a]] = 1.0
        o = np.concatenate([region_q, lane_q, needed, current,
                            [prog, blocked], goal, [self.tick / cfg.horizon]])
        # true concept: congestion band x dominant direction at the target
        total = self.queues[target].sum()
        ns = self.queues[target][0] + self.queues[target][2]
        ew = self.queues[target][1] + self.queues[target][3]
        band = 0 if total < 4 else (1 if total < 10 else 2)
        concept = band * 2 + (0 if ns >= ew else 1)
        phase_ids = np.arange(cfg.phases)
        served_mass = (self.queues[target][phase_ids % LANES_PER_INTERSECTION]
                       + self.queues[target][(phase_ids + 2) % LANES_PER_INTERSECTION])
        label = self.needed_phase[claim] if (claim is not None and a in m.owners.get(claim, ())) \
            else int(np.argmax(served_mass))
        af = np.zeros((cfg.phases, 4))
        af[:, 0] = served_mass / 10.0
        af[int(self.phases_now[target]), 1] = 1.0
        af[:, 2] = needed
        af[:, 3] = phase_ids / cfg.phases
        return o, concept, label, af

    # -- invariants --------------------------------------------------------------
    def conservation_holds(self) -> bool:
        return self.cum_arrived == self.cum_served + int(self.queues.sum())
