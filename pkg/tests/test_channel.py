import numpy as np
import pytest

from remalis.channel import (
    ChannelConfig,
    CoverageError,
    IntentionChannel,
    MessageStream,
    PropagationMode,
    RoutingError,
    belief_accuracy,
    coordination_reward,
    make_toy_belief_dataset,
    train_channel,
)
from remalis.intent import Belief, Intention, IntentionCodec, IntentionMessage
from remalis.numerics import Tensor, backward, check_gradients

CODEC = IntentionCodec(n_goals=3, n_subgoals=6, n_agents=3)


def make_channel(seed=0, **kw):
    cfg = ChannelConfig(**{"layers": 1, "hidden": 8, **kw})
    return IntentionChannel(CODEC, cfg, np.random.default_rng(seed))


def sample_intention():
    return Intention(goal_id=1, subgoals=(0, 2, 5),
                     next_subgoal_dist=np.array([0.2, 0.5, 0.3]),
                     assignment={0: 1, 2: 2, 5: 1})


class TestEmitMessages:
    def test_mode_none_empty(self):
        ch = make_channel()
        assert ch.emit_messages(sample_intention(), 0, PropagationMode.NONE) == []

    def test_mode_full_counts(self):
        ch = make_channel()
        msgs = ch.emit_messages(sample_intention(), 0, PropagationMode.FULL)
        assert sorted(m.recipient for m in msgs) == [1, 2]
        assert all(m.sender == 0 for m in msgs)

    def test_selective_routing_and_blocks(self):
        ch = make_channel()
        i = Intention(goal_id=1, subgoals=(0, 2, 5),
                      next_subgoal_dist=np.array([0.2, 0.5, 0.3]),
                      assignment={2: 2})
        msgs = ch.emit_messages(i, 0, PropagationMode.SELECTIVE)
        assert len(msgs) == 1
        assert msgs[0].recipient == 2
        sub_block = msgs[0].payload[CODEC.subgoal_slice]
        assert np.flatnonzero(sub_block).tolist() == [2]

    def test_selective_unknown_agent(self):
        ch = make_channel()
        i = sample_intention()
        i.assignment[2] = 7
        with pytest.raises(RoutingError):
            ch.emit_messages(i, 0, PropagationMode.SELECTIVE)

    def test_block_monotonicity_basic_selective_full(self):
        """Blocks delivered under basic <= selective (to its target) <= full."""
        ch = make_channel()
        i = sample_intention()
        basic = ch.emit_messages(i, 0, PropagationMode.BASIC)
        selective = ch.emit_messages(i, 0, PropagationMode.SELECTIVE)
        full = ch.emit_messages(i, 0, PropagationMode.FULL)
        by_rec = {m.recipient: m for m in full}
        for m in selective:
            assert np.all((m.payload != 0) <= (by_rec[m.recipient].payload != 0))
        for m in basic:
            sel = [s for s in selective if s.recipient == m.recipient]
            for s in sel:
                assert np.all((m.payload != 0) <= (s.payload != 0))


class TestInferBelief:
    def test_zero_params_uniform(self):
        ch = make_channel()
        for p in ch.params.values():
            p.data[:] = 0.0
        msg = IntentionMessage(1, 0, CODEC.encode(sample_intention()), 0)
        belief, _ = ch.infer_belief(msg, ch.initial_state())
        np.testing.assert_allclose(belief.goal_probs, np.full(3, 1 / 3), atol=1e-12)
        np.testing.assert_allclose(belief.subgoal_probs, np.full(6, 1 / 6), atol=1e-12)

    def test_deterministic(self):
        ch = make_channel(3)
        msg = IntentionMessage(1, 0, CODEC.encode(sample_intention()), 0)
        b1, s1 = ch.infer_belief(msg, ch.initial_state())
        b2, s2 = ch.infer_belief(msg, ch.initial_state())
        np.testing.assert_array_equal(b1.goal_probs, b2.goal_probs)
        np.testing.assert_array_equal(b1.subgoal_probs, b2.subgoal_probs)
        for a, b in zip(s1, s2):
            assert a.tobytes() == b.tobytes()

    def test_width_mismatch(self):
        ch = make_channel()
        from remalis.channel import CodecError
        with pytest.raises(CodecError):
            ch.infer_belief(IntentionMessage(1, 0, np.zeros(4), 0), ch.initial_state())

    def test_state_advances_per_message(self):
        ch = make_channel(5)
        msg = IntentionMessage(1, 0, CODEC.encode(sample_intention()), 0)
        _, s1 = ch.infer_belief(msg, ch.initial_state())
        _, s2 = ch.infer_belief(msg, s1)
        assert not np.array_equal(s1[0], s2[0])


class TestCoordinationReward:
    def onehot_beliefs(self, truths):
        beliefs = {}
        for i in truths:
            for j in truths:
                if i == j:
                    continue
                g = np.zeros(3)
                s = np.zeros(6)
                g[truths[j][0]] = 1.0
                s[truths[j][1]] = 1.0
                beliefs[(i, j)] = Belief(subject=j, goal_probs=g, subgoal_probs=s)
        return beliefs

    def test_one_hot_on_truth_is_zero(self):
        truths = {0: (0, 1), 1: (1, 2), 2: (2, 3)}
        assert coordination_reward(self.onehot_beliefs(truths), truths) == pytest.approx(0.0)

    def test_uniform_analytic(self):
        truths = {0: (0, 1), 1: (1, 2)}
        beliefs = {}
        for i in truths:
            for j in truths:
                if i != j:
                    beliefs[(i, j)] = Belief(subject=j, goal_probs=np.full(3, 1 / 3),
                                             subgoal_probs=np.full(6, 1 / 6))
        expected = -(np.log(3) + np.log(6))
        assert coordination_reward(beliefs, truths) == pytest.approx(expected, abs=1e-12)

    def test_random_instance_vs_hand_sum(self):
        rng = np.random.default_rng(17)
        truths = {a: (int(rng.integers(3)), int(rng.integers(6))) for a in range(3)}
        beliefs = {}
        expected_terms = []
        for i in range(3):
            for j in range(3):
                if i == j:
                    continue
                g = rng.random(3) + 0.01
                g /= g.sum()
                s = rng.random(6) + 0.01
                s /= s.sum()
                beliefs[(i, j)] = Belief(subject=j, goal_probs=g, subgoal_probs=s)
                expected_terms.append(np.log(g[truths[j][0]]) + np.log(s[truths[j][1]]))
        expected = float(np.mean(expected_terms))
        assert coordination_reward(beliefs, truths) == pytest.approx(expected, abs=1e-12)

    def test_missing_pair(self):
        truths = {0: (0, 1), 1: (1, 2)}
        with pytest.raises(CoverageError):
            coordination_reward({}, truths)

    def test_never_positive(self):
        rng = np.random.default_rng(99)
        for _ in range(50):
            truths = {a: (int(rng.integers(3)), int(rng.integers(6))) for a in range(2)}
            beliefs = {}
            for i in range(2):
                for j in range(2):
                    if i != j:
                        g = rng.random(3)
                        g /= g.sum()
                        s = rng.random(6)
                        s /= s.sum()
                        beliefs[(i, j)] = Belief(subject=j, goal_probs=g, subgoal_probs=s)
            assert coordination_reward(beliefs, truths) <= 0.0


class TestTraining:
    def test_gradient_matches_finite_differences(self):
        ch = make_channel(7, layers=1, hidden=4)
        streams, _ = make_toy_belief_dataset(0, n_sequences=3, seq_len=2, codec=CODEC)
        params = list(ch.params.values())
        err = check_gradients(lambda: ch.sequence_loss_t(streams[0]), params)
        assert err < 1e-4

    def test_zero_learning_rate_keeps_params(self):
        ch = make_channel(9)
        streams, _ = make_toy_belief_dataset(1, n_sequences=4, seq_len=2, codec=CODEC)
        before = {k: v.data.copy() for k, v in ch.params.items()}
        train_channel(ch, streams, steps=3, lr=0.0)
        for k, v in ch.params.items():
            assert before[k].tobytes() == v.data.tobytes()

    def test_loss_drops_80_percent_on_separable_toy(self):
        codec = IntentionCodec(n_goals=2, n_subgoals=4, n_agents=2)
        cfg = ChannelConfig(layers=1, hidden=16)
        ch = IntentionChannel(codec, cfg, np.random.default_rng(2))
        streams, _ = make_toy_belief_dataset(3, n_sequences=32, seq_len=2, codec=codec)
        trace = train_channel(ch, streams, steps=500, lr=5e-3)
        assert trace[-1] <= 0.2 * trace[0]


class TestToyBeliefTask:
    def test_learnability(self):
        streams, codec = make_toy_belief_dataset(11, n_sequences=240, seq_len=3)
        train, held = streams[:200], streams[200:]
        cfg = ChannelConfig(layers=2, hidden=16)
        ch = IntentionChannel(codec, cfg, np.random.default_rng(4))
        train_channel(ch, train[:64], steps=200, lr=5e-3)
        assert belief_accuracy(ch, held) >= 0.9
