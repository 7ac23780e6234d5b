import numpy as np
import pytest

from remalis.envs import (
    ConfigError,
    TrafficConfig,
    TrafficWorld,
    WebConfig,
    WebWorld,
    alignment,
    coordination_time,
    generate_mission,
    make_env,
)
from remalis.envs.traffic import TIERS as TRAFFIC_TIERS
from remalis.intent import Belief
from remalis.planning import SubgoalGraph


def serialize_world(world):
    return (world.queues.tobytes(), world.phases_now.tobytes(),
            tuple(sorted(world.mission.goal_ids.items())),
            tuple(sorted((k, tuple(v)) for k, v in world.mission.subgoal_sets.items())),
            tuple(sorted(world.needed_phase.items())))


class TestMission:
    def test_graph_acyclic_over_1000_seeds(self):
        for seed in range(1000):
            m = generate_mission(3, np.random.default_rng(seed))
            assert m.graph.topological_order() is not None

    def test_structure(self):
        m = generate_mission(3, np.random.default_rng(7))
        assert m.n_subgoals == 14
        assert len(m.exclusive) == 2
        for a in range(3):
            assert len(m.subgoal_sets[a]) in (4, 5)
            for sg in m.subgoal_sets[a]:
                assert a in m.owners[sg]
        # shared boundary subgoals are in both adjacent sets and assigned across
        for sg, (i, j) in m.shared_boundary.items():
            assert sg in m.subgoal_sets[i] and sg in m.subgoal_sets[j]
            assert m.assignment[i][sg] == j and m.assignment[j][sg] == i


class TestTrafficTiers:
    @pytest.mark.parametrize("tier,n_inter,max_phases", [
        ("easy", 9, 10), ("medium", 25, 15), ("hard", 64, 16), ("hell", 108, 28)])
    def test_tier_structure(self, tier, n_inter, max_phases):
        cfg = TrafficConfig(tier=tier)
        assert cfg.n_intersections == n_inter
        world = TrafficWorld(cfg)
        step, info = world.reset(seed=0)
        assert info.n_actions == TRAFFIC_TIERS[tier]["phases"]
        assert len(step.observations) == 3
        assert all(o.shape == (info.obs_width,) for o in step.observations)

    def test_easy_tier_paper_table(self):
        cfg = TrafficConfig(tier="easy")
        assert cfg.n_intersections == 9
        assert cfg.phases < 10
        assert TRAFFIC_TIERS["easy"]["rate_lo"] == 0.5 == TRAFFIC_TIERS["easy"]["rate_hi"]

    def test_medium_rates_within_band(self):
        world = TrafficWorld(TrafficConfig(tier="medium"))
        world.reset(seed=3)
        for _ in range(20):
            world.step([0] * 3, {a: None for a in range(3)})
            assert np.all(world._phase_rate >= 0.5 - 1e-9)
            assert np.all(world._phase_rate <= 2.0 + 1e-9)

    def test_unknown_tier(self):
        with pytest.raises(ConfigError):
            TrafficConfig(tier="nightmare")


class TestTrafficDynamics:
    def test_same_seed_identical_worlds(self):
        w1 = TrafficWorld(TrafficConfig(tier="easy"))
        w2 = TrafficWorld(TrafficConfig(tier="easy"))
        w1.reset(seed=11)
        w2.reset(seed=11)
        assert serialize_world(w1) == serialize_world(w2)
        for _ in range(5):
            s1 = w1.step([1, 2, 3], {0: None, 1: None, 2: None})
            s2 = w2.step([1, 2, 3], {0: None, 1: None, 2: None})
            assert s1.reward == s2.reward
            for a, b in zip(s1.observations, s2.observations):
                assert a.tobytes() == b.tobytes()

    def test_zero_arrivals_empty_queues_reward_zero(self):
        world = TrafficWorld(TrafficConfig(tier="easy"))
        world.reset(seed=0)
        world._sample_rates = lambda: np.zeros(9)
        step = world.step([2, 1, 0], {0: None, 1: None, 2: None})
        assert step.reward == 0.0
        assert world.queues.sum() == 0
        assert world.phases_now[world.regions[0][0]] == 2

    def test_single_queued_vehicle_served(self):
        world = TrafficWorld(TrafficConfig(tier="easy"))
        world.reset(seed=0)
        world._sample_rates = lambda: np.zeros(9)
        world.queues[0, 0] = 1
        world.cum_arrived += 1
        # phase 0 serves lanes 0 and 2 at the region-0 head intersection
        world.step([0, 0, 0], {0: None, 1: None, 2: None})
        assert world.queues[0, 0] == 0
        assert world.conservation_holds()

    def test_conservation_invariant(self):
        world = TrafficWorld(TrafficConfig(tier="medium"))
        world.reset(seed=5)
        rng = np.random.default_rng(0)
        for _ in range(25):
            actions = [int(rng.integers(12)) for _ in range(3)]
            world.step(actions, {a: None for a in range(3)})
            assert world.conservation_holds()

    def test_subgoal_progress_and_completion(self):
        world = TrafficWorld(TrafficConfig(tier="easy", blockage_prob=0.0))
        _, info = world.reset(seed=2)
        # pick a root subgoal of agent 0 (an opener with no predecessors)
        sg = next(s for s in info.subgoal_sets[0]
                  if not info.subgoal_graph.predecessors(s))
        needed = world.needed_phase[sg]
        claims = {0: sg, 1: None, 2: None}
        steps = 0
        while not world.completed[sg] and steps < 10:
            world.step([needed, 0, 0], {**claims})
            steps += 1
        assert world.completed[sg]
        # correct phase doubles progress: ceil(work / 2) ticks
        assert steps == -(-world.work_required[sg] // 2)


class TestWebWorld:
    def test_reset_and_shapes(self):
        world = WebWorld(WebConfig(tier="medium"))
        step, info = world.reset(seed=1)
        assert info.n_actions == 6
        assert all(o.shape == (info.obs_width,) for o in step.observations)
        assert all(f.shape == (6,) for f in step.feasible)

    def test_invalid_interaction_penalized(self):
        world = WebWorld(WebConfig(tier="easy"))
        step, info = world.reset(seed=4)
        a0_feas = step.feasible[0]
        bad = int(np.flatnonzero(~a0_feas)[0]) if (~a0_feas).any() else None
        if bad is None:
            pytest.skip("all actions feasible for this seed")
        out = world.step([bad, 5, 5], {a: None for a in range(3)})
        assert out.rejected[0]
        assert out.reward <= -0.1 + 1e-9

    def test_navigation_labels_lead_to_target(self):
        world = WebWorld(WebConfig(tier="easy", blockage_prob=0.0))
        step, info = world.reset(seed=6)
        sg = next(s for s in info.subgoal_sets[0]
                  if not info.subgoal_graph.predecessors(s))
        claims = {0: sg, 1: None, 2: None}
        # follow the env-provided correct action; must complete within horizon
        for _ in range(25):
            step = world.step([step.correct_actions[0], step.correct_actions[1],
                               step.correct_actions[2]], claims)
            if world.completed[sg]:
                break
        assert world.completed[sg]

    def test_hard_tier_ambiguity_blurs_features(self):
        w_easy = WebWorld(WebConfig(tier="easy"))
        w_hard = WebWorld(WebConfig(tier="hard"))
        w_easy.reset(seed=3)
        w_hard.reset(seed=3)
        f_easy = w_easy._control_features(0)
        f_hard = w_hard._control_features(0)
        assert set(np.unique(f_easy)) <= {0.0, 1.0}
        assert len(np.unique(f_hard)) > 2

    def test_determinism(self):
        w1 = WebWorld(WebConfig(tier="all"))
        w2 = WebWorld(WebConfig(tier="all"))
        s1, _ = w1.reset(seed=9)
        s2, _ = w2.reset(seed=9)
        for a, b in zip(s1.observations, s2.observations):
            assert a.tobytes() == b.tobytes()
        for _ in range(5):
            o1 = w1.step([0, 1, 4], {0: None, 1: None, 2: None})
            o2 = w2.step([0, 1, 4], {0: None, 1: None, 2: None})
            assert o1.reward == o2.reward


class TestAlignment:
    def graph(self):
        return SubgoalGraph(nodes=(0, 1, 2, 3), edges=((0, 1),))

    def beliefs(self, claims, wrong_about=None):
        out = {}
        for i in claims:
            for j in claims:
                if i == j:
                    continue
                s = np.full(4, 1e-6)
                target = claims[j]
                if target is None:
                    target = 0
                if wrong_about is not None and j == wrong_about:
                    target = (target + 1) % 4
                s[target] = 1.0
                out[(i, j)] = Belief(subject=j, goal_probs=np.array([1.0]),
                                     subgoal_probs=s / s.sum())
        return out

    def test_all_distinct_feasible_correct_is_one(self):
        claims = {0: 0, 1: 2, 2: 3}
        completed = np.zeros(4, dtype=bool)
        a = alignment(claims, self.beliefs(claims), completed, self.graph(), set())
        assert a == 1.0

    def test_double_claim_exclusive_halves(self):
        claims = {0: 2, 1: 2, 2: 3, 3: 0}
        completed = np.zeros(4, dtype=bool)
        a = alignment(claims, self.beliefs(claims), completed, self.graph(), {2})
        assert a <= 0.5

    def test_dependency_blocked_claim_not_aligned(self):
        claims = {0: 1, 1: 2}
        completed = np.zeros(4, dtype=bool)  # 1 depends on 0 (incomplete)
        a = alignment(claims, self.beliefs(claims), completed, self.graph(), set())
        assert a == 0.5

    def test_wrong_belief_breaks_alignment(self):
        claims = {0: 0, 1: 2}
        completed = np.zeros(4, dtype=bool)
        b = self.beliefs(claims, wrong_about=0)
        a = alignment(claims, b, completed, self.graph(), set())
        assert a == 0.5

    def test_brute_force_recount(self):
        rng = np.random.default_rng(12)
        graph = self.graph()
        for _ in range(100):
            claims = {i: (int(rng.integers(4)) if rng.random() < 0.9 else None)
                      for i in range(3)}
            completed = rng.random(4) < 0.3
            exclusive = {int(rng.integers(4))}
            beliefs = {}
            for i in range(3):
                for j in range(3):
                    if i != j:
                        s = rng.random(4) + 1e-6
                        beliefs[(i, j)] = Belief(subject=j, goal_probs=np.array([1.0]),
                                                 subgoal_probs=s / s.sum())
            got = alignment(claims, beliefs, completed, graph, exclusive)
            expected = 0
            for i in range(3):
                c = claims[i]
                if c is None or completed[c]:
                    continue
                if any(not completed[u] for u in graph.predecessors(c)):
                    continue
                if c in exclusive and any(claims[j] == c for j in range(3) if j != i):
                    continue
                if all(int(np.argmax(beliefs[(j, i)].subgoal_probs)) == c
                       for j in range(3) if j != i):
                    expected += 1
            assert got == pytest.approx(expected / 3)


class TestCoordinationTime:
    def test_immediate(self):
        assert coordination_time([1.0] * 10, 0.6) == 0

    def test_never(self):
        assert coordination_time([0.1] * 10, 0.6) is None

    def test_scan_oracle(self):
        series = [0.0, 0.7, 0.5, 0.7, 0.7, 0.7, 0.2, 0.9, 0.9, 0.9]
        got = coordination_time(series, 0.6)
        # brute scan: first t with 3 consecutive >= threshold
        expected = None
        for t in range(len(series) - 2):
            if all(series[t + k] >= 0.6 for k in range(3)):
                expected = t
                break
        assert got == expected == 3

    def test_invalid_threshold(self):
        with pytest.raises(ValueError):
            coordination_time([1.0], 0.0)


class TestMakeEnv:
    def test_kinds(self):
        assert isinstance(make_env("traffic", "easy"), TrafficWorld)
        assert isinstance(make_env("web", "hard"), WebWorld)
        with pytest.raises(ConfigError):
            make_env("desktop", "easy")
