import math

import numpy as np
import pytest

from remalis import numerics as nm
from remalis.grounding import (
    CompositionError,
    ConfigError,
    ConfusionLedger,
    EventError,
    GroundedEmbedding,
    GroundingModule,
    LossError,
    apply_confusion_gate,
    compose_grounding,
    confusion_loss,
    grounding_entropy,
    uncertainty,
    update_memory,
)
from remalis.numerics import Tensor, check_gradients


def make_module(seed=0, in_width=10, c_width=4, n_concepts=5, d_g=6):
    return GroundingModule(in_width, c_width, n_concepts, d_g, np.random.default_rng(seed))


class TestGround:
    def test_empty_feedback_history_contributes_zero(self):
        m = make_module(1)
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal(10))
        e_none, *_ = m.forward_t(x, None, np.random.default_rng(1))
        e_zero, *_ = m.forward_t(x, np.zeros(4), np.random.default_rng(1))
        np.testing.assert_array_equal(e_none.data, e_zero.data)

    def test_zero_params_embedding_is_conv_bias(self):
        m = make_module(2)
        for p in m.params.values():
            p.data[:] = 0.0
        emb, logits = m.ground(np.ones(4), np.ones(3), np.ones(3), None,
                               np.random.default_rng(0))
        np.testing.assert_allclose(emb.e, np.zeros(6), atol=1e-15)
        np.testing.assert_allclose(emb.sigma2, np.full(6, math.log(2.0)), atol=1e-12)
        np.testing.assert_allclose(logits, np.zeros(5), atol=1e-15)

    def test_gradient_of_embedding_norm(self):
        m = make_module(3)
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal(10))
        c = rng.standard_normal(4)
        tensors = list(m.params.values())

        def make_loss():
            e, *_ = m.forward_t(x, c, np.random.default_rng(7))
            return nm.tsum(e * e)

        err = check_gradients(make_loss, tensors)
        assert err < 1e-4


class TestComposeGrounding:
    def identity_params(self, d):
        return {"W_self": Tensor(np.eye(d)), "W_msg": Tensor(np.zeros((d, d))),
                "b": Tensor(np.zeros(d))}

    def test_single_member_identity(self):
        # tanh is the layer nonlinearity, so use atanh to isolate the pass-through
        member = np.array([0.3, -0.2, 0.1])
        out = compose_grounding([np.arctanh(member)], np.array([1.0]),
                                self.identity_params(3))
        np.testing.assert_allclose(out, member, atol=1e-12)

    def test_zero_weights_give_f_of_zero(self):
        params = self.identity_params(3)
        out = compose_grounding([np.ones(3), np.ones(3)], np.zeros(2), params)
        np.testing.assert_allclose(out, np.tanh(np.zeros(3)), atol=1e-15)

    def test_three_members_vs_hand_computed(self):
        rng = np.random.default_rng(9)
        members = [rng.standard_normal(4) for _ in range(3)]
        w = rng.random(3)
        params = {"W_self": Tensor(rng.standard_normal((4, 4))),
                  "W_msg": Tensor(rng.standard_normal((4, 4))),
                  "b": Tensor(rng.standard_normal(4))}
        acc = sum(float(wi) * mi for wi, mi in zip(w, members))
        expected = np.tanh(acc @ params["W_self"].data + params["b"].data)
        got = compose_grounding(members, w, params)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_empty_members(self):
        with pytest.raises(CompositionError):
            compose_grounding([], np.zeros(0), self.identity_params(2))


class TestUncertainty:
    def heads(self, rng, d):
        return {"W_mu": Tensor(rng.standard_normal((d, d)) * 0.3, requires_grad=True),
                "b_mu": Tensor(np.zeros(d), requires_grad=True),
                "W_sig": Tensor(np.zeros((d, d)), requires_grad=True),
                "b_sig": Tensor(np.zeros(d), requires_grad=True)}

    def test_zero_sigma_head_gives_softplus_zero(self):
        rng = np.random.default_rng(3)
        _, sigma2, _ = uncertainty(rng.standard_normal(4), self.heads(rng, 4),
                                   np.random.default_rng(0))
        np.testing.assert_allclose(sigma2.data, np.full(4, math.log(2.0)), atol=1e-12)

    def test_fixed_seed_reproducible_sample(self):
        rng = np.random.default_rng(3)
        heads = self.heads(rng, 4)
        x = rng.standard_normal(4)
        _, _, z1 = uncertainty(x, heads, np.random.default_rng(42))
        _, _, z2 = uncertainty(x, heads, np.random.default_rng(42))
        assert z1.tobytes() == z2.tobytes()

    def test_sample_variance_matches_sigma2(self):
        rng = np.random.default_rng(3)
        heads = self.heads(rng, 3)
        heads["b_sig"].data[:] = np.array([0.5, -0.5, 1.5])
        x = np.zeros(3)
        gen = np.random.default_rng(7)
        samples = np.stack([uncertainty(x, heads, gen)[2] for _ in range(100_000)])
        _, sigma2, _ = uncertainty(x, heads, np.random.default_rng(0))
        emp = samples.var(axis=0)
        np.testing.assert_allclose(emp, sigma2.data, rtol=0.03)


class TestConfusionGate:
    def test_zero_matrix_identity(self):
        ledger = ConfusionLedger(4)
        logits = np.array([0.3, -1.0, 2.0, 0.0])
        e = np.exp(logits - logits.max())
        expected = e / e.sum()
        got = apply_confusion_gate(logits, ledger, 1.5)
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_zero_strength_identity(self):
        ledger = ConfusionLedger(4)
        update_memory(ledger, [(0, 1), (2, 3)])
        logits = np.array([0.3, -1.0, 2.0, 0.0])
        e = np.exp(logits - logits.max())
        expected = e / e.sum()
        np.testing.assert_allclose(apply_confusion_gate(logits, ledger, 0.0),
                                   expected, atol=1e-12)

    def test_confused_concept_downweighted_exact(self):
        ledger = ConfusionLedger(2, decay=1.0)
        update_memory(ledger, [(0, 1)])
        # total mass 2 (symmetric), row masses [0.5, 0.5]; with a one-sided C
        ledger.C[1, 0] = 0.0
        got = apply_confusion_gate(np.zeros(2), ledger, 1.0)
        # penalties: [1*1/max(1,1), 0] = [1, 0] -> softmax([-1, 0])
        e = np.exp(np.array([-1.0, 0.0]))
        expected = e / e.sum()
        np.testing.assert_allclose(got, expected, atol=1e-12)
        assert got[0] < got[1]

    def test_negative_strength_rejected(self):
        with pytest.raises(ConfigError):
            apply_confusion_gate(np.zeros(2), ConfusionLedger(2), -0.1)

    def test_monotone_in_confusion_mass(self):
        logits = np.array([0.5, 0.2, -0.3])
        ledger = ConfusionLedger(3, decay=1.0)
        prev = apply_confusion_gate(logits, ledger, 2.0)[0]
        for _ in range(5):
            update_memory(ledger, [(0, 1)])
            cur = apply_confusion_gate(logits, ledger, 2.0)[0]
            assert cur <= prev + 1e-12
            prev = cur


class TestUpdateMemory:
    def test_empty_events_decay_one_unchanged(self):
        ledger = ConfusionLedger(3, decay=1.0)
        update_memory(ledger, [(0, 2)])
        c_before = ledger.C.copy()
        m_before = ledger.M.copy()
        update_memory(ledger, [])
        np.testing.assert_array_equal(ledger.C, c_before)
        np.testing.assert_array_equal(ledger.M, m_before)

    def test_single_event_from_zero(self):
        ledger = ConfusionLedger(6)
        update_memory(ledger, [(2, 5)])
        expected = np.zeros((6, 6), dtype=np.int64)
        expected[2, 5] = expected[5, 2] = 1
        np.testing.assert_array_equal(ledger.M, expected)
        np.testing.assert_array_equal(ledger.C != 0, expected != 0)

    def test_self_event_rejected(self):
        with pytest.raises(EventError):
            update_memory(ConfusionLedger(3), [(1, 1)])

    def test_memory_recount_oracle(self):
        rng = np.random.default_rng(31)
        ledger = ConfusionLedger(5, decay=0.9)
        log = []
        for _ in range(60):
            events = [(int(a), int(b)) for a, b in
                      rng.integers(0, 5, size=(rng.integers(0, 4), 2)) if a != b]
            update_memory(ledger, events)
            log.append(events)
        recount = np.zeros((5, 5), dtype=np.int64)
        for events in log:
            for (i, j) in events:
                recount[i, j] += 1
                recount[j, i] += 1
        np.testing.assert_array_equal(ledger.M, recount)

    def test_memory_nondecreasing_and_c_symmetric(self):
        rng = np.random.default_rng(37)
        ledger = ConfusionLedger(4, decay=0.8)
        prev = ledger.M.copy()
        for _ in range(40):
            events = [(int(a), int(b)) for a, b in
                      rng.integers(0, 4, size=(rng.integers(0, 3), 2)) if a != b]
            update_memory(ledger, events)
            assert np.all(ledger.M >= prev)
            assert np.all(ledger.C >= 0)
            np.testing.assert_allclose(ledger.C, ledger.C.T, atol=1e-12)
            assert np.all(np.diag(ledger.C) == 0)
            prev = ledger.M.copy()


class TestConfusionLoss:
    def test_confident_correct_grounding_zero(self):
        probs = Tensor(np.eye(3)[[0, 1, 2, 0]])
        scores = Tensor(np.zeros((3, 3)))
        loss = confusion_loss(probs, [0, 1, 2, 0], scores, [(0, 1), (1, 2)])
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)

    def test_uniform_attention_arithmetic(self):
        # two pairs, Conf = 0.4 and 0.0 -> 0.5*0.4 + 0.5*0 = 0.2
        probs = np.zeros((2, 3))
        probs[0] = [0.6, 0.4, 0.0]  # true 0, mass 0.4 on 1
        probs[1] = [0.0, 1.0, 0.0]  # true 1, no mass on 0
        loss = confusion_loss(Tensor(probs), [0, 1], Tensor(np.zeros((3, 3))),
                              [(0, 1), (0, 2)])
        # Conf(0,1) = 0.5*(0.4 + 0.0) = 0.2; Conf(0,2) = 0.5*(0.0+0) = 0
        assert float(loss.data) == pytest.approx(0.1, abs=1e-12)

    def test_zero_pairs_rejected(self):
        with pytest.raises(LossError):
            confusion_loss(Tensor(np.eye(2)), [0, 1], Tensor(np.zeros((2, 2))), [])

    def test_gradient_wrt_probs_path_and_scores(self):
        rng = np.random.default_rng(41)
        logits = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        scores = Tensor(rng.standard_normal((3, 3)) * 0.1, requires_grad=True)
        labels = [0, 1, 2, 1]
        pairs = [(0, 1), (1, 2), (0, 2)]

        def make_loss():
            probs = nm.softmax(logits)
            return confusion_loss(probs, labels, scores, pairs)

        err = check_gradients(make_loss, [logits, scores])
        assert err < 1e-4


class TestGroundingEntropy:
    def test_analytic_zero(self):
        s2 = np.full(3, 1.0 / (2 * math.pi * math.e))
        assert grounding_entropy(s2) == pytest.approx(0.0, abs=1e-10)

    def test_doubling_raises_by_half_d_ln2(self):
        rng = np.random.default_rng(4)
        s2 = rng.random(5) + 0.1
        d = 5
        assert grounding_entropy(2 * s2) - grounding_entropy(s2) == pytest.approx(
            0.5 * d * math.log(2), abs=1e-10)

    def test_formula_oracle(self):
        rng = np.random.default_rng(8)
        s2 = rng.random(7) + 0.05
        expected = 0.5 * sum(math.log(2 * math.pi * math.e * v) for v in s2)
        assert grounding_entropy(s2) == pytest.approx(expected, abs=1e-10)

    def test_embedding_entropy_consistent(self):
        emb = GroundedEmbedding(e=np.zeros(2), mu=np.zeros(2),
                                sigma2=np.array([0.5, 2.0]),
                                entropy=grounding_entropy(np.array([0.5, 2.0])))
        assert emb.entropy == pytest.approx(grounding_entropy(emb), abs=1e-12)

    def test_positive_sigma_enforced(self):
        with pytest.raises(ValueError):
            GroundedEmbedding(e=np.zeros(1), mu=np.zeros(1),
                              sigma2=np.array([0.0]), entropy=0.0)
