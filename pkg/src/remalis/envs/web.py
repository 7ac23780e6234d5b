"""Synthetic web-workflow world.

Pages form a small navigation graph; each agent browses independently.
Sub-goals are workflow steps bound to a (page, control) pair: work
accrues while the claiming agent sits on the target page and doubles
when it touches the right control.  The hard tier blurs control-type
features across controls, so resolving them needs page context and
deliberately exercises grounding confusion.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .base import (
    ConfigError,
    EnvStep,
    Mission,
    WorldInfo,
    generate_mission,
    instruction_features,
    specialization_for,
    N_GOALS,
)

CONTROL_TYPES = ("link", "button", "textbox", "dropdown")
CONCEPTS = CONTROL_TYPES + ("navigation",)
SPEC_TAGS = ("query_processing", "form_filling", "confirmation", "retrieval")
CONTROL_SLOTS = 4
NAV_ACTIONS = 2  # forward, back

TIERS = {
    "easy": dict(pages=3, extra_edges=0, ambiguity=0.0),
    "medium": dict(pages=6, extra_edges=2, ambiguity=0.0),
    "hard": dict(pages=8, extra_edges=3, ambiguity=0.6),
    "all": dict(pages=8, extra_edges=2, ambiguity=0.3),
}


@dataclass
class WebConfig:
    tier: str = "easy"
    n_agents: int = 3
    horizon: int = 30
    work_required: int = 6
    blockage_prob: float = 0.4
    blockage_len: int = 8
    step_bonus: float = 1.0
    invalid_penalty: float = 0.1

    def __post_init__(self):
        if self.tier not in TIERS:
            raise ConfigError(f"unknown web tier {self.tier!r}")
        if self.n_agents < 2:
            raise ConfigError("web world needs at least 2 agents")
        if self.horizon < 1 or self.work_required < 1:
            raise ConfigError("horizon and work_required must be positive")

    @property
    def n_pages(self) -> int:
        return TIERS[self.tier]["pages"]

    @property
    def n_actions(self) -> int:
        return CONTROL_SLOTS + NAV_ACTIONS


class WebWorld:
    """Seeded, deterministic web-workflow simulator."""

    def __init__(self, config: WebConfig):
        self.config = config
        self.tier = TIERS[config.tier]
        self.n_agents = config.n_agents
        self.mission: Mission | None = None
        self.info: WorldInfo | None = None

    def reset(self, seed: int) -> tuple[EnvStep, WorldInfo]:
        cfg = self.config
        self.rng = np.random.default_rng(seed)
        self.tick = 0
        n_pages = cfg.n_pages
        # page graph: a chain plus a few extra forward shortcuts
        edges = {(p, p + 1) for p in range(n_pages - 1)}
        edges |= {(p + 1, p) for p in range(n_pages - 1)}
        for _ in range(self.tier["extra_edges"]):
            u = int(self.rng.integers(0, n_pages - 1))
            v = int(self.rng.integers(u + 1, n_pages))
            edges.add((u, v))
            edges.add((v, u))
        self.page_edges = edges
        # controls: per page, a type per slot (some slots empty)
        self.control_type = np.full((n_pages, CONTROL_SLOTS), -1, dtype=np.int64)
        for p in range(n_pages):
            n_controls = int(self.rng.integers(2, CONTROL_SLOTS + 1))
            for s in range(n_controls):
                self.control_type[p, s] = int(self.rng.integers(len(CONTROL_TYPES)))
        self.mission = generate_mission(self.n_agents, self.rng)
        m = self.mission
        self.target_page = {}
        self.target_slot = {}
        for sg in range(m.n_subgoals):
            page = int(self.rng.integers(n_pages))
            slots = np.flatnonzero(self.control_type[page] >= 0)
            self.target_page[sg] = page
            self.target_slot[sg] = int(self.rng.choice(slots))
        self.block_from = {}
        self.block_until = {}
        for a in range(self.n_agents):
            if self.rng.random() < cfg.blockage_prob:
                sg = int(self.rng.choice(m.subgoal_sets[a][:3]))
                start = int(self.rng.integers(4, max(5, cfg.horizon // 2)))
                self.block_from[sg] = start
                self.block_until[sg] = start + cfg.blockage_len
        self.work_required = {sg: int(self.rng.integers(max(2, cfg.work_required - 2),
                                                        cfg.work_required + 3))
                              for sg in range(m.n_subgoals)}
        self.progress = np.zeros(m.n_subgoals, dtype=np.int64)
        self.completed = np.zeros(m.n_subgoals, dtype=bool)
        self.agent_page = [0] * self.n_agents
        self.last_claims: dict[int, int | None] = {a: None for a in range(self.n_agents)}
        # precomputed next-hop table for shortest-path navigation labels
        self._next_hop = self._all_pairs_next_hop(n_pages)
        self.info = self._world_info()
        return self._make_step(reward=0.0, progressed=[False] * self.n_agents,
                               rejected=[False] * self.n_agents), self.info

    def _all_pairs_next_hop(self, n_pages: int) -> np.ndarray:
        hop = np.full((n_pages, n_pages), -1, dtype=np.int64)
        for src in range(n_pages):
            frontier = [src]
            prev = {src: src}
            while frontier:
                u = frontier.pop(0)
                for (a, b) in sorted(self.page_edges):
                    if a == u and b not in prev:
                        prev[b] = u
                        frontier.append(b)
            for dst in prev:
                cur = dst
                while prev[cur] != src and cur != src:
                    cur = prev[cur]
                hop[src, dst] = cur if dst != src else src
        return hop

    def _world_info(self) -> WorldInfo:
        cfg = self.config
        m = self.mission
        n_act = cfg.n_actions
        adjacency = tuple((a, (a + 1) % n_act) for a in range(n_act)) + \
            tuple(((a + 1) % n_act, a) for a in range(n_act))
        obs_width = (2 * cfg.n_pages + CONTROL_SLOTS * len(CONTROL_TYPES) + CONTROL_SLOTS
                     + 2 + N_GOALS + 1 + n_act)
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
            n_actions=n_act, action_adjacency=adjacency, action_feat_width=4,
            obs_width=obs_width, horizon=cfg.horizon)

    # -- dynamics ---------------------------------------------------------------
    def _feasible(self, a: int) -> np.ndarray:
        page = self.agent_page[a]
        feas = np.zeros(self.config.n_actions, dtype=bool)
        for s in range(CONTROL_SLOTS):
            feas[s] = self.control_type[page, s] >= 0
        feas[CONTROL_SLOTS] = any((page, q) in self.page_edges and q > page
                                  for q in range(self.config.n_pages))
        feas[CONTROL_SLOTS + 1] = any((page, q) in self.page_edges and q < page
                                      for q in range(self.config.n_pages))
        return feas

    def _apply_nav(self, a: int, forward: bool) -> None:
        page = self.agent_page[a]
        candidates = sorted(q for q in range(self.config.n_pages)
                            if (page, q) in self.page_edges
                            and (q > page if forward else q < page))
        if candidates:
            self.agent_page[a] = candidates[0] if forward else candidates[-1]

    def step(self, actions: list[int], claims: dict[int, int | None]) -> EnvStep:
        cfg = self.config
        m = self.mission
        self.tick += 1
        self.last_claims = dict(claims)
        reward = 0.0
        rejected = [False] * self.n_agents
        touched: list[int | None] = [None] * self.n_agents
        for a, action in enumerate(actions):
            feas = self._feasible(a)
            if not (0 <= action < cfg.n_actions) or not feas[action]:
                rejected[a] = True
                reward -= cfg.invalid_penalty
                continue
            if action == CONTROL_SLOTS:
                self._apply_nav(a, forward=True)
            elif action == CONTROL_SLOTS + 1:
                self._apply_nav(a, forward=False)
            else:
                touched[a] = action
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
            if self.agent_page[a] != self.target_page[sg]:
                continue
            gain = 1
            if touched[a] == self.target_slot[sg]:
                gain += 1
            self.progress[sg] += gain
            progressed[a] = True
            if self.progress[sg] >= self.work_required[sg]:
                self.completed[sg] = True
                reward += cfg.step_bonus
        done = self.tick >= cfg.horizon or bool(self.completed.all())
        return self._make_step(reward=reward, progressed=progressed,
                               rejected=rejected, done=done)

    # -- outputs ------------------------------------------------------------------
    def _make_step(self, reward: float, progressed: list[bool], rejected: list[bool],
                   done: bool = False) -> EnvStep:
        obs, concepts, labels, feats, feas = [], [], [], [], []
        for a in range(self.n_agents):
            o, c, y, f, fs = self._agent_view(a)
            obs.append(o)
            concepts.append(c)
            labels.append(y)
            feats.append(f)
            feas.append(fs)
        return EnvStep(observations=obs, true_concepts=concepts, correct_actions=labels,
                       action_feats=feats, feasible=feas, reward=reward,
                       completed=self.completed.copy(), progressed=progressed,
                       rejected=rejected, done=done)

    def _control_features(self, page: int) -> np.ndarray:
        """Per-slot type one-hots, blurred across slots on ambiguous tiers."""
        amb = self.tier["ambiguity"]
        feats = np.zeros((CONTROL_SLOTS, len(CONTROL_TYPES)))
        for s in range(CONTROL_SLOTS):
            t = self.control_type[page, s]
            if t >= 0:
                feats[s, t] = 1.0
        if amb > 0.0:
            blurred = feats.mean(axis=0, keepdims=True)
            feats = (1 - amb) * feats + amb * blurred
        return feats

    def _agent_view(self, a: int) -> tuple[np.ndarray, int, int, np.ndarray, np.ndarray]:
        cfg = self.config
        m = self.mission
        page = self.agent_page[a]
        claim = self.last_claims.get(a)
        cur = np.zeros(cfg.n_pages)
        cur[page] = 1.0
        tgt = np.zeros(cfg.n_pages)
        prog = 0.0
        blocked = 0.0
        own_claim = claim is not None and a in m.owners.get(claim, ())
        if own_claim:
            tgt[self.target_page[claim]] = 1.0
            prog = self.progress[claim] / self.work_required[claim]
            if self.block_from.get(claim, cfg.horizon + 1) <= self.tick + 1 < self.block_until.get(claim, -1):
                blocked = 1.0
        ctrl = self._control_features(page)
        exists = (self.control_type[page] >= 0).astype(np.float64)
        goal = np.zeros(N_GOALS)
        goal[m.goal_ids[a]] = 1.0
        feas = self._feasible(a)
        o = np.concatenate([cur, tgt, ctrl.reshape(-1), exists, [prog, blocked],
                            goal, [self.tick / cfg.horizon], feas.astype(np.float64)])
        if own_claim and page == self.target_page[claim]:
            label = self.target_slot[claim]
            concept = int(self.control_type[self.target_page[claim], self.target_slot[claim]])
        elif own_claim:
            label = CONTROL_SLOTS if self.target_page[claim] > page else CONTROL_SLOTS + 1
            concept = len(CONTROL_TYPES)  # navigation
        else:
            label = CONTROL_SLOTS if feas[CONTROL_SLOTS] else (
                CONTROL_SLOTS + 1 if feas[CONTROL_SLOTS + 1] else int(np.flatnonzero(feas)[0]))
            concept = len(CONTROL_TYPES)
        af = np.zeros((cfg.n_actions, 4))
        for act in range(cfg.n_actions):
            af[act, 0] = 1.0 if feas[act] else 0.0
            af[act, 1] = 1.0 if act == label else 0.0
            af[act, 2] = 1.0 if act >= CONTROL_SLOTS else 0.0
            af[act, 3] = act / cfg.n_actions
        return o, concept, label, af, feas
