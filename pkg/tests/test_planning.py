import numpy as np
import pytest

from remalis.intent import Intention
from remalis.numerics import Tensor, check_gradients
from remalis.planning import (
    DataError,
    DeadlockError,
    Planner,
    PlannerConfig,
    PlannerSample,
    ReplanTrigger,
    SubgoalGraph,
    TriggerError,
    replan,
    train_planner,
)

CHAIN = SubgoalGraph(nodes=(0, 1, 2, 3), edges=((0, 1), (1, 2), (2, 3)))


def make_planner(seed=0, n=4, graph_head=True, in_width=6):
    cfg = PlannerConfig(hidden=8, node_feat_width=3, graph_head=graph_head)
    return Planner(in_width, n, cfg, np.random.default_rng(seed))


def rand_inputs(rng, planner, n):
    x = rng.standard_normal(planner.in_width)
    feats = rng.standard_normal((n, planner.config.node_feat_width))
    return x, feats


class TestSubgoalGraph:
    def test_cycle_rejected(self):
        with pytest.raises(ValueError):
            SubgoalGraph(nodes=(0, 1), edges=((0, 1), (1, 0)))

    def test_topological_order(self):
        order = CHAIN.topological_order()
        assert CHAIN.is_valid_order(order)

    def test_unknown_node_rejected(self):
        with pytest.raises(ValueError):
            SubgoalGraph(nodes=(0,), edges=((0, 5),))


class TestPlanNext:
    def test_single_unmasked_gets_probability_one(self):
        p = make_planner()
        rng = np.random.default_rng(1)
        x, feats = rand_inputs(rng, p, 4)
        mask = np.array([False, False, True, False])
        dist = p.plan_next(x, feats, CHAIN, mask)
        np.testing.assert_allclose(dist, [0, 0, 1, 0], atol=1e-12)

    def test_zero_params_uniform_over_unmasked(self):
        p = make_planner()
        for t in p.params.values():
            t.data[:] = 0.0
        rng = np.random.default_rng(2)
        x, feats = rand_inputs(rng, p, 4)
        mask = np.array([True, True, False, False])
        dist = p.plan_next(x, feats, CHAIN, mask)
        np.testing.assert_allclose(dist, [0.5, 0.5, 0, 0], atol=1e-12)

    def test_all_masked_is_deadlock(self):
        p = make_planner()
        rng = np.random.default_rng(3)
        x, feats = rand_inputs(rng, p, 4)
        with pytest.raises(DeadlockError):
            p.plan_next(x, feats, CHAIN, np.zeros(4, dtype=bool))

    def test_chain_vs_hand_unrolled_forward(self):
        p = make_planner(7)
        rng = np.random.default_rng(4)
        x, feats = rand_inputs(rng, p, 4)
        mask = np.ones(4, dtype=bool)
        got = p.plan_next(x, feats, CHAIN, mask)

        pp = {k: v.data for k, v in p.params.items()}
        h = np.tanh(x @ pp["enc.W1"] + pp["enc.b1"])
        h = np.tanh(h @ pp["enc.W2"] + pp["enc.b2"])
        nf = np.tanh(feats @ pp["node.Wf"] + (h @ pp["node.Wh"])[None, :])
        msgs = np.zeros_like(nf)
        msgs[1] = nf[0]
        msgs[2] = nf[1]
        msgs[3] = nf[2]
        passed = np.tanh(nf @ pp["gmp.W_self"] + msgs @ pp["gmp.W_msg"] + pp["gmp.b"])
        logits = (passed @ pp["out.w"]).reshape(-1)
        e = np.exp(logits - logits.max())
        expected = e / e.sum()
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_distribution_valid_and_blocked_zero(self):
        p = make_planner(11)
        rng = np.random.default_rng(5)
        for _ in range(50):
            x, feats = rand_inputs(rng, p, 4)
            mask = rng.random(4) < 0.6
            if not mask.any():
                continue
            dist = p.plan_next(x, feats, CHAIN, mask)
            assert abs(dist.sum() - 1.0) < 1e-9
            assert np.all(dist >= 0)
            assert np.all(dist[~mask] == 0.0)


class TestTrainPlanner:
    def make_samples(self, rng, planner, n_samples=6):
        samples = []
        for _ in range(n_samples):
            x, feats = rand_inputs(rng, planner, 4)
            mask = np.ones(4, dtype=bool)
            samples.append(PlannerSample(x=x, node_feats=feats, mask=mask,
                                         label=int(rng.integers(4))))
        return samples

    def test_nll_gradient(self):
        p = make_planner(13)
        rng = np.random.default_rng(6)
        s = self.make_samples(rng, p, 2)

        def make_loss():
            import remalis.numerics as nm
            losses = []
            for smp in s:
                dist = p.masked_dist_t(Tensor(smp.x), Tensor(smp.node_feats),
                                       CHAIN, smp.mask)
                losses.append(-nm.log(nm.clip_min(dist[smp.label], 1e-12)))
            return (losses[0] + losses[1]) * 0.5

        err = check_gradients(make_loss, list(p.params.values()))
        assert err < 1e-4

    def test_masked_label_rejected(self):
        p = make_planner()
        rng = np.random.default_rng(7)
        s = self.make_samples(rng, p, 1)
        s[0].mask[s[0].label] = False
        with pytest.raises(DataError):
            train_planner(p, CHAIN, s)

    def test_zero_lr_unchanged(self):
        p = make_planner(17)
        rng = np.random.default_rng(8)
        s = self.make_samples(rng, p)
        before = {k: v.data.copy() for k, v in p.params.items()}
        train_planner(p, CHAIN, s, steps=2, lr=0.0)
        for k, v in p.params.items():
            assert before[k].tobytes() == v.data.tobytes()

    def test_deterministic_chain_task_reaches_low_nll(self):
        # 3-subgoal chain: the realized next subgoal is decided by a feature
        p = make_planner(19, n=3, in_width=3)
        graph = SubgoalGraph(nodes=(0, 1, 2), edges=((0, 1), (1, 2)))
        rng = np.random.default_rng(9)
        samples = []
        for _ in range(30):
            label = int(rng.integers(3))
            x = np.zeros(3)
            x[label] = 1.0
            feats = np.zeros((3, p.config.node_feat_width))
            feats[label, 0] = 1.0
            samples.append(PlannerSample(x=x, node_feats=feats,
                                         mask=np.ones(3, dtype=bool), label=label))
        trace = train_planner(p, graph, samples, steps=300, lr=5e-3)
        assert trace[-1] < 0.1

    def test_nll_decreases_over_seeds(self):
        for seed in range(5):
            p = make_planner(seed, n=3, in_width=3)
            graph = SubgoalGraph(nodes=(0, 1, 2), edges=((0, 1),))
            rng = np.random.default_rng(100 + seed)
            samples = []
            for _ in range(20):
                label = int(rng.integers(3))
                x = np.zeros(3)
                x[label] = 1.0
                feats = rng.standard_normal((3, p.config.node_feat_width)) * 0.1
                feats[label, 0] += 1.0
                samples.append(PlannerSample(x=x, node_feats=feats,
                                             mask=np.ones(3, dtype=bool), label=label))
            trace = train_planner(p, graph, samples, steps=60, lr=5e-3)
            assert trace[-1] < trace[0]


class TestReplan:
    def make_intention(self, order=(0, 1, 2, 3)):
        dist = np.full(len(order), 1.0 / len(order))
        return Intention(goal_id=0, subgoals=tuple(order), next_subgoal_dist=dist,
                         assignment={order[0]: 1})

    def test_trigger_on_last_unchanged(self):
        i = self.make_intention()
        out = replan(i, ReplanTrigger(subgoal=3), CHAIN)
        assert out.subgoals == i.subgoals

    def test_head_of_chain_moves_independent_first(self):
        graph = SubgoalGraph(nodes=(0, 1, 2, 3), edges=((0, 1), (1, 2)))
        i = self.make_intention((0, 1, 2, 3))
        out = replan(i, ReplanTrigger(subgoal=0, feasible={3}), graph)
        assert out.subgoals[0] == 3
        assert graph.is_valid_order(out.subgoals)

    def test_unknown_subgoal_rejected(self):
        i = self.make_intention((0, 1))
        i2 = Intention(goal_id=0, subgoals=(0, 1),
                       next_subgoal_dist=np.array([0.5, 0.5]))
        with pytest.raises(TriggerError):
            replan(i2, ReplanTrigger(subgoal=9), CHAIN)

    def test_least_loaded_reassignment(self):
        i = self.make_intention((0, 1, 2, 3))
        trig = ReplanTrigger(subgoal=1, team_load={1: 3, 2: 1},
                             eligible_agents=(1, 2))
        out = replan(i, trig, CHAIN)
        assert out.assignment[1] == 2

    def test_output_always_topological_property(self):
        rng = np.random.default_rng(55)
        for _ in range(200):
            n = int(rng.integers(2, 7))
            nodes = tuple(range(n))
            edges = tuple((int(u), int(v)) for u in range(n) for v in range(u + 1, n)
                          if rng.random() < 0.3)
            graph = SubgoalGraph(nodes=nodes, edges=edges)
            order = tuple(graph.topological_order())
            i = Intention(goal_id=0, subgoals=order,
                          next_subgoal_dist=np.full(n, 1.0 / n))
            trig = ReplanTrigger(subgoal=int(rng.choice(order)))
            out = replan(i, trig, graph)
            assert graph.is_valid_order(out.subgoals)
            assert abs(out.next_subgoal_dist.sum() - 1.0) < 1e-9
