import dataclasses
import json

import numpy as np
import pytest

from remalis import numerics as nm
from remalis.checkpoint import CheckpointError, load_params, save_params
from remalis.numerics import backward, max_rel_err, numeric_gradient
from remalis.trainer import (
    LOSS_KEYS,
    RunConfig,
    build_team,
    checkpoint,
    collective_objective,
    episode_seed_for,
    evaluate,
    grounding_loss_t,
    knockout_feedback,
    make_optimizers,
    planner_loss_t,
    restore,
    router_loss_t,
    run_episode,
    run_training,
    update_all,
    _execution_losses,
)


def micro_config(**kw):
    base = dict(seed=0, episodes=2, ticks=6, batch_size=2, n_agents=2,
                channel_layers=1, channel_hidden=8, planner_hidden=8,
                grounding_dim=8, c_width=4, policy_enc_width=6,
                sample_stride=1, channel_steps_per_update=1)
    base.update(kw)
    return RunConfig(**base)


@pytest.fixture(scope="module")
def micro_run():
    cfg = micro_config()
    team, env = build_team(cfg)
    traces = [run_episode(env, team, cfg, episode_seed_for(cfg, i)) for i in range(2)]
    return cfg, team, env, traces


def trace_fingerprint(trace):
    return json.dumps([r.to_json() for r in trace.ticks], sort_keys=True)


class TestRunEpisode:
    def test_zero_tick_episode_empty(self):
        cfg = micro_config(ticks=0)
        team, env = build_team(micro_config())
        trace = run_episode(env, team, dataclasses.replace(cfg, ticks=0), 5)
        assert trace.ticks == []
        assert trace.episode_return == 0.0
        assert trace.e_sum == 0

    def test_same_seed_bit_identical(self):
        cfg = micro_config()
        team, env = build_team(cfg)
        t1 = run_episode(env, team, cfg, 42)
        t2 = run_episode(env, team, cfg, 42)
        assert trace_fingerprint(t1) == trace_fingerprint(t2)
        assert np.array_equal(np.array(t1.rewards), np.array(t2.rewards))

    def test_mode_none_no_messages_uniform_beliefs(self):
        cfg = micro_config(channel_mode="none")
        team, env = build_team(cfg)
        trace = run_episode(env, team, cfg, 7)
        assert all(len(r.messages) == 0 for r in trace.ticks)
        k = team.codec.n_subgoals
        for r in trace.ticks:
            for b in r.beliefs:
                np.testing.assert_allclose(b["subgoal_probs"], np.full(k, 1 / k),
                                           atol=1e-12)

    def test_rollout_does_not_touch_params(self):
        cfg = micro_config()
        team, env = build_team(cfg)
        before = team.param_hash()
        run_episode(env, team, cfg, 3)
        assert team.param_hash() == before


class TestCollectiveObjective:
    def test_alpha_beta_zero_is_neg_return(self, micro_run):
        cfg, team, env, traces = micro_run
        cfg0 = dataclasses.replace(cfg, alpha=0.0, beta=0.0)
        L, br = collective_objective(traces, cfg0)
        expected = -float(np.mean([t.episode_return for t in traces]))
        assert L == pytest.approx(expected, abs=1e-12)

    def test_arithmetic_example(self):
        # U=1, E=2 each tick, zero return, alpha=.5, beta=.25 -> 1.0 + decay
        from remalis.trainer import EpisodeTrace
        t = EpisodeTrace(seed=0, env_seed=0)
        t.u_series = [1.0] * 4
        t.e_series = [2] * 4
        t.rewards = [0.0] * 4
        cfg = micro_config(alpha=0.5, beta=0.25)
        L, br = collective_objective([t], cfg, decay_term=0.125)
        assert L == pytest.approx(1.0 + 0.125, abs=1e-12)

    def test_linear_in_alpha(self, micro_run):
        cfg, team, env, traces = micro_run
        eps = 1e-3
        lo, _ = collective_objective(traces, dataclasses.replace(cfg, alpha=0.3))
        hi, _ = collective_objective(traces, dataclasses.replace(cfg, alpha=0.3 + eps))
        mean_u = float(np.mean([u for t in traces for u in t.u_series]))
        assert (hi - lo) / eps == pytest.approx(mean_u, rel=1e-6)

    def test_replay_recompute_matches(self, micro_run, tmp_path):
        from remalis.harness import collective_objective_from_log, write_trace_log
        cfg, team, env, traces = micro_run
        path = write_trace_log(traces, cfg, tmp_path / "trace.jsonl")
        L_log, br_log = collective_objective_from_log(path)
        L, br = collective_objective(traces, cfg)
        assert L_log == pytest.approx(L, abs=1e-10)


class TestUpdateAll:
    def test_zero_lr_params_unchanged(self, micro_run):
        cfg, team, env, traces = micro_run
        cfg0 = dataclasses.replace(cfg, lr=0.0, weight_decay=0.0)
        team0, _ = build_team(cfg0)
        before = {k: v.data.copy() for k, v in team0.named_params().items()}
        opts = make_optimizers(team0, cfg0, 1)
        update_all(traces, team0, opts, cfg0)
        for k, v in team0.named_params().items():
            assert before[k].tobytes() == v.data.tobytes(), k

    def test_report_schema_exact(self, micro_run):
        cfg, team, env, traces = micro_run
        team2, _ = build_team(cfg)
        opts = make_optimizers(team2, cfg, 1)
        report = update_all(traces, team2, opts, cfg)
        assert tuple(report.keys()) == LOSS_KEYS

    def test_component_gradients_match_finite_differences(self, micro_run):
        cfg, team, env, traces = micro_run

        def check(make_loss, params, tol=1e-4, max_entries=60):
            loss = make_loss()
            backward(loss, params=params)
            worst = 0.0
            for p in params:
                analytic = p.grad.copy()
                if p.data.size > max_entries:
                    continue
                numeric = numeric_gradient(lambda: float(make_loss().data), p)
                worst = max(worst, max_rel_err(analytic, numeric))
            return worst

        streams = [s for t in traces for s in t.channel_streams.values() if s.payloads]
        small = [p for p in team.channel.params.values() if p.data.size <= 40]
        assert check(lambda: team.channel.batched_loss_t(streams[:2]), small) < 1e-4

        if any(r.productive for t in traces for r in t.planner_records):
            small = [p for p in team.planner.params.values() if p.data.size <= 40]
            assert check(lambda: planner_loss_t(traces, team), small) < 1e-4

        small = [p for p in team.grounding.params.values() if p.data.size <= 40]
        assert check(lambda: grounding_loss_t(traces, team, cfg)[0], small) < 1e-4

        small = [p for p in team.policies[0].params.values() if p.data.size <= 40]
        small += [p for p in team.approx.params.values() if p.data.size <= 40]

        def exec_total():
            l_rl, l_aux, l_exe = _execution_losses(traces, team, cfg)
            return l_rl + l_aux * cfg.lambda_aux + l_exe

        assert check(exec_total, small) < 1e-4

        small = list(team.router.params.values())
        assert check(lambda: router_loss_t(traces, team), small) < 1e-4

    def test_nan_gradient_aborts_with_component_name(self, micro_run):
        from remalis.trainer import TrainingAborted
        cfg, team, env, traces = micro_run
        team2, _ = build_team(cfg)
        team2.channel.params["readout.Wg"].data[0, 0] = float("nan")
        opts = make_optimizers(team2, cfg, 1)
        with pytest.raises(TrainingAborted, match="channel"):
            update_all(traces, team2, opts, cfg)


class TestCheckpoint:
    def test_round_trip_identity(self, tmp_path):
        rng = np.random.default_rng(0)
        params = {"a.W": rng.standard_normal((3, 4)), "b": rng.standard_normal(5),
                  "scalar": np.array(2.5)}
        path = tmp_path / "p.rmls"
        save_params(path, params)
        back = load_params(path)
        assert set(back) == set(params)
        for k in params:
            assert np.asarray(params[k]).tobytes() == back[k].tobytes()

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.rmls"
        path.write_bytes(b"XXXX" + b"\x01" + b"\x00" * 8)
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_truncated_rejected(self, tmp_path):
        rng = np.random.default_rng(1)
        path = tmp_path / "p.rmls"
        save_params(path, {"w": rng.standard_normal(10)})
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(CheckpointError):
            load_params(path)

    def test_restored_team_identical_rollout(self, tmp_path):
        cfg = micro_config()
        team, env = build_team(cfg)
        t1 = run_episode(env, team, cfg, 11)
        path = tmp_path / "team.rmls"
        checkpoint(team, path)
        team2, env2 = build_team(cfg)
        restore(team2, path)
        t2 = run_episode(env2, team2, cfg, 11)
        assert trace_fingerprint(t1) == trace_fingerprint(t2)


class TestRunTraining:
    def test_short_run_produces_metrics(self):
        cfg = micro_config(episodes=4)
        team, metrics, _ = run_training(cfg)
        assert len(metrics) == 4
        assert all(np.isfinite(m.episode_return) for m in metrics)
        assert set(metrics[-1].losses.keys()) == set(LOSS_KEYS)

    def test_determinism_across_runs(self):
        cfg = micro_config(episodes=4)
        _, m1, _ = run_training(cfg)
        _, m2, _ = run_training(cfg)
        for a, b in zip(m1, m2):
            assert a.episode_return == b.episode_return
            assert a.mean_alignment == b.mean_alignment
            assert a.losses == b.losses

    def test_knockout_feedback_config(self):
        cfg = knockout_feedback(micro_config())
        assert cfg.alpha == 0.0 and cfg.beta == 0.0
        assert not cfg.feedback_enabled
        team, env = build_team(cfg)
        trace = run_episode(env, team, cfg, 3)
        assert trace.replans == 0

    def test_paper_preset_sizes(self):
        cfg = RunConfig(network_preset="paper")
        assert cfg.channel_layers == 4
        assert cfg.channel_hidden == 256
        assert cfg.planner_hidden == 512
        assert cfg.grounding_dim == 768
        assert cfg.lr == 1e-4
        assert cfg.batch_size == 32
