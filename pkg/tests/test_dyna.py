import math

import numpy as np
import pytest

import dyna_ood.dyna as dyna_mod
from dyna_ood.agent import QNetwork
from dyna_ood.core import ReplayBuffer, RolloutBatch, Transition
from dyna_ood.dyna import (
    DynaConfig,
    SimPool,
    branched_rollout,
    evaluate_policy,
    model_nll,
    pretrain_data,
    pretrain_model,
    run_dyna,
)
from dyna_ood.env import DiscretePendulumEnv, LinearGaussianEnv
from dyna_ood.errors import ConfigError, EmptyBufferError, NumericalError
from dyna_ood.filter import RejectSchedule
from dyna_ood.model import KdeModel, MlpGaussianModel


def const_reward_env(horizon=7):
    # reward is exactly 1 everywhere, dynamics are deterministic
    return LinearGaussianEnv(0.5 * np.eye(2), np.zeros((2, 2)), np.zeros(2), np.zeros(2), np.ones(2), horizon=horizon)


def filled_buffer(env, n, rng):
    buf = ReplayBuffer(n)
    s = env.reset(rng)
    for _ in range(n):
        a = int(rng.integers(env.n_actions))
        s2, r, done = env.step(s, a, rng)
        buf.push(Transition(s, a, s2, r, done))
        s = env.reset(rng) if done else s2
    return buf


def small_cfg(**kw):
    base = dict(episodes=2, horizon=20, rollout_length=2, n_branches=5, updates_per_step=2, batch_size=8, refit_period=10, eval_episodes=2)
    base.update(kw)
    return DynaConfig(**base)


class TestConfig:
    def test_rollout_size_must_equal_n_times_l(self):
        with pytest.raises(ConfigError) as e:
            DynaConfig(n_branches=3, rollout_length=4, rollout_size=10)
        assert e.value.key == "dyna.m"

    @pytest.mark.parametrize("kw", [dict(episodes=0), dict(updates_per_step=-1), dict(real_fraction=2.0), dict(real_capacity=1)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            DynaConfig(**kw)

    def test_defaults(self):
        cfg = DynaConfig(episodes=3, horizon=4, n_branches=5, rollout_length=2)
        assert cfg.rollout_size == 10 and cfg.total_steps == 12 and cfg.pool_window == 4


class TestPretrain:
    def test_zero_samples_leaves_model_unfitted(self, rng):
        m = KdeModel(2)
        assert pretrain_model(DiscretePendulumEnv(n_torques=2), m, 0, rng) is m and not m.fitted

    def test_identity_dynamics(self, rng):
        env = LinearGaussianEnv(np.eye(2), np.zeros((2, 2)), np.zeros(2), np.ones(2), np.zeros(2), bound=1.0)
        m = MlpGaussianModel(2, 2, rng, hidden=(), epochs=30, batch_size=32, lr=1e-2)
        pretrain_model(env, m, 2000, rng)
        S = env.sample_states(rng, 300)
        mean, _ = m.moments_batch(S, rng.integers(0, 2, 300))
        assert np.max(np.linalg.norm(mean - S, axis=1)) < 0.05

    def test_data_covers_box(self, rng):
        env = DiscretePendulumEnv()
        data = pretrain_data(env, 500, rng)
        S = data.states()
        assert len(data) == 500 and np.all(S >= env.state_low) and np.all(S <= env.state_high)


class TestBranchedRollout:
    def setup_method(self):
        self.env = LinearGaussianEnv.random(3, 2, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        self.d_real = filled_buffer(self.env, 50, rng)
        self.model = KdeModel(2, bandwidth=1.0).fit(self.d_real)
        self.agent = QNetwork.build(3, 2, rng, hidden=(4,))

    def test_one_step_starts_from_real_states(self, rng):
        b = branched_rollout(self.model, self.d_real, self.agent, 10, 1, rng, self.env)
        real = {tuple(s) for s in self.d_real.states()}
        assert np.all(b.step == 1) and all(tuple(s) in real for s in b.s)

    def test_size_is_n_times_l(self, rng):
        b = branched_rollout(self.model, self.d_real, self.agent, 3, 4, rng, self.env)
        assert len(b) == 12 and b.step.tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3, 4, 4, 4]
        # chained: each later state is a previous prediction
        assert np.array_equal(b.s[3:6], b.s_next[0:3])

    def test_rewards_are_exact(self, rng):
        b = branched_rollout(self.model, self.d_real, self.agent, 5, 2, rng, self.env)
        assert np.array_equal(b.r, self.env.reward_batch(b.s, b.a))

    def test_terminated_branches_stop(self, rng):
        env = DiscretePendulumEnv()
        d_real = filled_buffer(env, 40, rng)
        far = KdeModel(3, bandwidth=100.0)
        far.set_support(d_real.states(), d_real.arrays()[1], np.full((40, 2), 10.0))  # always leaves the box
        b = branched_rollout(far, d_real, QNetwork.build(2, 3, rng), 40, 3, rng, env)
        assert np.all(b.step == 1) and np.all(b.done)

    def test_empty_real_buffer(self, rng):
        with pytest.raises(EmptyBufferError):
            branched_rollout(self.model, ReplayBuffer(3), self.agent, 1, 1, rng, self.env)


class TestEvaluate:
    def test_constant_reward(self, rng):
        env = const_reward_env(horizon=7)
        mean, std = evaluate_policy(env, QNetwork.build(2, 2, rng), 4, rng)
        assert (mean, std) == (7.0, 0.0)

    def test_deterministic_env_has_zero_spread(self, rng):
        env = DiscretePendulumEnv(init_theta=0.0, init_omega=0.0)
        _, std = evaluate_policy(env, QNetwork.build(2, 3, rng), 5, rng)
        assert std == 0.0

    def test_needs_episodes(self, rng):
        with pytest.raises(ValueError):
            evaluate_policy(const_reward_env(), QNetwork.build(2, 2, rng), 0, rng)


class TestSimPool:
    def test_window_slides(self):
        pool = SimPool(2)
        for n in (3, 4, 5):
            pool.add(RolloutBatch(np.full((n, 1), float(n)), np.zeros(n), np.zeros(n), np.zeros((n, 1)), np.zeros(n), np.ones(n)))
        assert len(pool) == 9 and set(pool.all().s.ravel()) == {4.0, 5.0}

    def test_sample_rows_come_from_pool(self, rng):
        pool = SimPool(3)
        pool.add(RolloutBatch(np.arange(4.0)[:, None], np.zeros(4), np.arange(4.0), np.zeros((4, 1)), np.zeros(4), np.ones(4)))
        s, _, r, _, _ = pool.sample(50, rng)
        assert np.array_equal(s[:, 0], r)


def pendulum_setup(seed=0, model_kind="kde"):
    env = DiscretePendulumEnv(horizon=30)
    rng = np.random.default_rng(seed)
    if model_kind == "kde":
        model = KdeModel(3, bandwidth=0.3)
        pretrain_model(env, model, 200, rng)
    else:
        model = MlpGaussianModel(2, 3, rng, hidden=(8,), epochs=2, batch_size=16)
        pretrain_model(env, model, 200, rng)
    agent = QNetwork.build(2, 3, np.random.default_rng(seed + 1), hidden=(8,), alpha=0.01)
    return env, model, agent


class TestRunDyna:
    def test_minimal_loop(self):
        env, model, agent = pendulum_setup()
        before = agent.theta.flat().copy()
        cfg = DynaConfig(episodes=1, horizon=1, rollout_length=1, n_branches=1, updates_per_step=0)
        agent, trace, d_real = run_dyna(env, model, agent, cfg, seed=3)
        assert len(d_real) == 1 and trace.n_simulated == 1
        assert np.array_equal(before, agent.theta.flat())
        assert len(trace.evals) == 1

    def test_vacuous_filter_equals_no_filter(self):
        runs = []
        for sch in (RejectSchedule("off"), RejectSchedule("static", epsilon=math.inf)):
            env, model, agent = pendulum_setup(model_kind="mlp")
            cfg = small_cfg(schedule=sch)
            agent, trace, _ = run_dyna(env, model, agent, cfg, seed=5)
            runs.append((agent.theta.flat(), trace))
        assert np.array_equal(runs[0][0], runs[1][0])
        assert runs[0][1].n_kept == runs[1][1].n_kept == runs[0][1].n_simulated
        assert [e["eval_return_mean"] for e in runs[0][1].evals] == [e["eval_return_mean"] for e in runs[1][1].evals]

    @pytest.mark.parametrize("sch", [RejectSchedule("static", epsilon=0.05), RejectSchedule("dynamic", total_episodes=2, rollout_length=2)])
    def test_invariants_under_filtering(self, sch, monkeypatch):
        made = []
        real_make = dyna_mod.make_index

        def spy(*a, **kw):
            made.append(real_make(*a, **kw))
            return made[-1]

        monkeypatch.setattr(dyna_mod, "make_index", spy)
        env, model, agent = pendulum_setup()
        cfg = small_cfg(schedule=sch)
        _, trace, d_real = run_dyna(env, model, agent, cfg, seed=2)
        assert len(d_real) == cfg.total_steps == len(trace.steps)
        for rec in trace.steps:
            f = rec.get("filter")
            if f:
                assert f["kept"] + f["rejected"] == rec["simulated"] and f["kept"] <= rec["simulated"]
        # index and D_real hold the same states in insertion order
        assert np.array_equal(made[0].points, d_real.states())
        assert trace.n_kept <= trace.n_simulated

    def test_dynamic_keeps_roughly_first_steps_in_first_episode(self):
        env, model, agent = pendulum_setup()
        sch = RejectSchedule("dynamic", total_episodes=2, rollout_length=2)
        _, trace, _ = run_dyna(env, model, agent, small_cfg(schedule=sch), seed=4)
        for rec in trace.steps:
            f = rec.get("filter")
            if f and rec["episode"] == 1:
                assert f["rejected"] == math.ceil(0.5 * rec["simulated"])
            if f and rec["episode"] == 2:
                assert f["rejected"] == 0

    def test_deterministic_given_seed(self):
        outs = []
        for _ in range(2):
            env, model, agent = pendulum_setup()
            _, trace, _ = run_dyna(env, model, agent, small_cfg(schedule=RejectSchedule("static", epsilon=0.2)), seed=9)
            outs.append(trace.evals)
        assert outs[0] == outs[1]

    def test_unfitted_model_means_no_rollouts(self, rng):
        env = DiscretePendulumEnv(horizon=10)
        agent = QNetwork.build(2, 3, rng, hidden=(4,))
        cfg = small_cfg(horizon=10, refit_period=1000)
        _, trace, _ = run_dyna(env, KdeModel(3), agent, cfg, seed=0)
        assert trace.n_simulated == 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_error_carries_trace(self):
        env, model, agent = pendulum_setup()
        agent.theta.weights[-1][:] = np.inf
        with pytest.raises(NumericalError) as e:
            run_dyna(env, model, agent, small_cfg(), seed=0)
        assert hasattr(e.value, "trace")

    def test_model_nll(self, rng):
        env = DiscretePendulumEnv()
        data = filled_buffer(env, 50, rng)
        assert math.isnan(model_nll(KdeModel(3), data))
        assert np.isfinite(model_nll(KdeModel(3, bandwidth=0.5).fit(data), data))
