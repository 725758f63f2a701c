"""Dyna-style training loop with optional OOD filtering of branched rollouts.

Per real environment step the loop does, in order: one ε-greedy step in
the real environment (appended to ``D_real`` and to the NN index), ``N``
branched model rollouts of length ``L`` started from states drawn out of
``D_real``, the OOD filter, ``G`` DQN updates on minibatches mixing real
and kept simulated data, and a model refit every ``F`` steps.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .agent import QNetwork, act_epsilon_greedy, dqn_update_batch, epsilon_schedule
from .core import ReplayBuffer, RolloutBatch, Transition, rng_stream, state_action_keys
from .errors import ConfigError, EmptyBufferError, NoSupportError, NumericalError
from .filter import FilterReport, RejectSchedule, apply_schedule
from .index import make_index
from .model import ModelEnsemble


@dataclass
class DynaConfig:
    """Loop sizes. ``episodes`` (K) epochs of ``horizon`` (H) real steps each."""

    episodes: int = 20
    horizon: int = 250
    rollout_length: int = 1
    n_branches: int = 400
    rollout_size: int | None = None
    updates_per_step: int = 20
    batch_size: int = 64
    real_fraction: float = 0.05
    pretrain_samples: int = 2000
    refit_period: int = 250
    refit_epochs: int | None = None
    pool_steps: int | None = None
    rollout_epsilon: float = 0.0
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    eval_every: int | None = None
    eval_episodes: int = 5
    real_capacity: int = 1_000_000
    schedule: RejectSchedule = field(default_factory=lambda: RejectSchedule(kind="off"))
    exact_index: bool = False
    index_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.rollout_size is None:
            self.rollout_size = self.n_branches * self.rollout_length
        for key in ("episodes", "horizon", "rollout_length", "n_branches"):
            if getattr(self, key) < 1:
                raise ConfigError(f"dyna.{key}", "must be >= 1")
        if self.rollout_size != self.n_branches * self.rollout_length:
            raise ConfigError("dyna.m", f"rollout size {self.rollout_size} != N*L = {self.n_branches * self.rollout_length}")
        if self.updates_per_step < 0:
            raise ConfigError("dyna.g", "must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("agent.batch_size", "must be >= 1")
        if not 0.0 <= self.real_fraction <= 1.0:
            raise ConfigError("agent.real_fraction", "must lie in [0, 1]")
        if self.pretrain_samples < 0:
            raise ConfigError("dyna.pretrain_samples", "must be >= 0")
        if self.refit_period < 1:
            raise ConfigError("dyna.f", "must be >= 1")
        if not 0.0 <= self.rollout_epsilon <= 1.0:
            raise ConfigError("dyna.rollout_epsilon", "must lie in [0, 1]")
        if self.eval_episodes < 1:
            raise ConfigError("dyna.eval_episodes", "must be >= 1")
        if self.real_capacity < self.total_steps:
            raise ConfigError("dyna.real_capacity", "must hold every real step (K*H) so index and buffer stay in sync")

    @property
    def total_steps(self) -> int:
        return self.episodes * self.horizon

    @property
    def pool_window(self) -> int:
        return self.pool_steps or self.horizon

    @property
    def eval_period(self) -> int:
        return self.eval_every or self.horizon


@dataclass
class RunTrace:
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    n_simulated: int = 0
    n_kept: int = 0

    def eval_returns(self) -> np.ndarray:
        return np.array([e["eval_return_mean"] for e in self.evals])


class SimPool:
    """Sliding window over the kept rollout batches of the last ``window`` real steps."""

    def __init__(self, window: int):
        self.batches: deque[RolloutBatch] = deque(maxlen=window)
        self._cum = np.zeros(1, dtype=np.int64)

    def __len__(self) -> int:
        return int(self._cum[-1])

    def add(self, batch: RolloutBatch) -> None:
        self.batches.append(batch)
        self._cum = np.concatenate([[0], np.cumsum([len(b) for b in self.batches])])

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        idx = rng.integers(0, len(self), size=n)
        which = np.searchsorted(self._cum, idx, side="right") - 1
        local = idx - self._cum[which]
        rows = [self.batches[w] for w in which]
        return (
            np.stack([b.s[i] for b, i in zip(rows, local)]),
            np.array([b.a[i] for b, i in zip(rows, local)]),
            np.array([b.r[i] for b, i in zip(rows, local)]),
            np.stack([b.s_next[i] for b, i in zip(rows, local)]),
            np.array([b.done[i] for b, i in zip(rows, local)]),
        )

    def all(self) -> RolloutBatch:
        return RolloutBatch.concat(self.batches)


def pretrain_data(env, n_samples: int, rng: np.random.Generator) -> ReplayBuffer:
    """``(s, a)`` uniform over the state box times the action set, ``s' ~ P*(s, a)``."""
    S = env.sample_states(rng, n_samples)
    A = rng.integers(0, env.n_actions, size=n_samples)
    S2 = env.step_batch(S, A, rng)
    R = env.reward_batch(S, A)
    return ReplayBuffer.from_arrays(S, A, R, S2, np.zeros(n_samples, dtype=bool), capacity=max(n_samples, 1))


def pretrain_model(env, model, n_samples: int, rng: np.random.Generator):
    """Fit ``model`` on ``n_samples`` uniformly drawn transitions; ``n_samples=0`` leaves it unfitted."""
    if n_samples < 0:
        raise ValueError("n_samples must be >= 0")
    if n_samples == 0:
        return model
    return model.fit(pretrain_data(env, n_samples, rng))


def branched_rollout(
    model, d_real: ReplayBuffer, agent: QNetwork, N: int, L: int, rng: np.random.Generator, env, epsilon: float = 0.0
) -> RolloutBatch:
    """``N`` rollouts of length ``L`` from states sampled out of ``d_real``.

    Actions are greedy, or uniformly random with probability ``epsilon``
    per row. Rows are step-major: all first-step transitions come first. A
    branch stops early when the known termination rule fires on a predicted
    state.
    """
    if len(d_real) == 0:
        raise EmptyBufferError("cannot branch from an empty real buffer")
    S = d_real.batch(d_real.sample_indices(N, rng))[0].copy()
    parts = []
    for k in range(1, L + 1):
        if len(S) == 0:
            break
        A = agent.greedy(S)
        if epsilon > 0:
            explore = rng.random(len(S)) < epsilon
            A = np.where(explore, rng.integers(0, agent.n_actions, size=len(S)), A)
        _, _, S2 = model.predict_batch(S, A, rng)
        R = env.reward_batch(S, A)
        D = env.terminal_batch(S2)
        parts.append(RolloutBatch(S, A, R, S2, D, np.full(len(S), k)))
        S = S2[~D]
    if not parts:
        return RolloutBatch.empty(d_real.dim)
    return RolloutBatch.concat(parts)


def evaluate_policy(env, agent: QNetwork, n_episodes: int, rng: np.random.Generator, horizon: int | None = None) -> tuple[float, float]:
    """Mean and std of the undiscounted return of ``n_episodes`` greedy episodes (run in lockstep)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    H = horizon or env.spec.horizon
    S = np.stack([env.reset(rng) for _ in range(n_episodes)])
    alive = np.ones(n_episodes, dtype=bool)
    ret = np.zeros(n_episodes)
    for _ in range(H):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        A = agent.greedy(S[idx])
        ret[idx] += env.reward_batch(S[idx], A)
        S2 = env.step_batch(S[idx], A, rng)
        S[idx] = S2
        alive[idx[env.terminal_batch(S2)]] = False
    return float(ret.mean()), float(ret.std())


def model_nll(model, data: ReplayBuffer, last: int = 1000) -> float:
    """Gaussian NLL (no constant) of the most recent ``last`` real transitions."""
    if len(data) == 0 or not model.fitted:
        return math.nan
    lo = max(0, len(data) - last)
    S, A, _, S2, _ = data.batch(np.arange(lo, len(data)))
    members = model.members if isinstance(model, ModelEnsemble) else [model]
    vals = []
    for m in members:
        try:
            mean, var = m.moments_batch(S, A)
        except NoSupportError:
            return math.nan
        vals.append(0.5 * np.mean(np.sum((S2 - mean) ** 2 / var + np.log(var), axis=1)))
    return float(np.mean(vals))


def _real_key(s: np.ndarray, a: int, sch: RejectSchedule, n_actions: int) -> np.ndarray:
    if sch.key_mode == "state":
        return s
    return state_action_keys(s, a, n_actions, sch.action_weight)[0]


def run_dyna(env, model, agent: QNetwork, cfg: DynaConfig, seed: int = 0, callback=None, record_wallclock: bool = False):
    """Train ``agent`` for ``K*H`` real steps. Returns ``(agent, trace, d_real)``.

    Every random decision draws from a named stream derived from ``seed``
    (``env``, ``act``, ``rollout``, ``agent``, ``index``, ``eval``), so
    switching the filter on or off never shifts unrelated draws. A
    :class:`NumericalError` is re-raised with the partial trace attached as
    ``err.trace``.
    """
    streams = {k: rng_stream(seed, k) for k in ("env", "act", "rollout", "agent", "index", "eval")}
    sch = cfg.schedule
    d_real = ReplayBuffer(cfg.real_capacity)
    index = None
    if sch.kind != "off":
        key_dim = env.d_s + (env.n_actions if sch.key_mode == "state_action" else 0)
        index = make_index(key_dim, exact=cfg.exact_index, rng=streams["index"], **cfg.index_params)
    pool = SimPool(cfg.pool_window)
    trace = RunTrace()
    n_real = int(round(cfg.real_fraction * cfg.batch_size))
    window = {"kept": 0, "rejected": 0, "eps": math.nan}
    t0 = time.perf_counter()

    s = env.reset(streams["env"])
    h_ep = 0
    try:
        for t in range(cfg.total_steps):
            k = t // cfg.horizon + 1
            eps_greedy = epsilon_schedule(t, cfg.total_steps, cfg.eps_start, cfg.eps_end, cfg.eps_fraction)
            a = act_epsilon_greedy(agent, s, eps_greedy, streams["act"])
            s2, r, done = env.step(s, a, streams["env"])
            d_real.push(Transition(s, a, s2, r, done))
            if index is not None:
                index.insert(_real_key(s, a, sch, env.n_actions))
            h_ep += 1
            if done or h_ep >= env.spec.horizon:
                s, h_ep = env.reset(streams["env"]), 0
            else:
                s = s2

            rec = {"episode": k, "step": t % cfg.horizon + 1, "real_steps": t + 1, "eps_greedy": eps_greedy}
            report: FilterReport | None = None
            if model.fitted and cfg.n_branches > 0:
                batch = branched_rollout(model, d_real, agent, cfg.n_branches, cfg.rollout_length, streams["rollout"], env, cfg.rollout_epsilon)
                kept, report = apply_schedule(index, batch, sch, k, env.n_actions)
                pool.add(kept)
                trace.n_simulated += len(batch)
                trace.n_kept += len(kept)
                window["kept"] += report.kept
                window["rejected"] += report.rejected
                window["eps"] = report.eps
                rec.update(simulated=len(batch), shortfall=cfg.rollout_size - len(batch), filter=report.as_dict())

            for _ in range(cfg.updates_per_step):
                _agent_update(agent, d_real, pool, cfg.batch_size, n_real, streams["agent"])

            if (t + 1) % cfg.refit_period == 0 and _can_fit(model, d_real):
                model.fit(d_real, cfg.refit_epochs)

            if (t + 1) % cfg.eval_period == 0 or t + 1 == cfg.total_steps:
                mean, std = evaluate_policy(env, agent, cfg.eval_episodes, rng_stream(seed, f"eval/{t + 1}"))
                row = {
                    "real_steps": t + 1,
                    "episode": k,
                    "eval_return_mean": mean,
                    "eval_return_std": std,
                    "kept_count": window["kept"],
                    "rejected_count": window["rejected"],
                    "eps_k": window["eps"],
                    "model_nll": model_nll(model, d_real),
                    "wallclock_ms": int((time.perf_counter() - t0) * 1000) if record_wallclock else 0,
                }
                trace.evals.append(row)
                rec["eval_return"] = mean
                window = {"kept": 0, "rejected": 0, "eps": math.nan}
            trace.steps.append(rec)
            if callback is not None:
                callback(rec, trace)
    except NumericalError as err:
        err.trace = trace
        raise
    return agent, trace, d_real


def _can_fit(model, data: ReplayBuffer) -> bool:
    members = model.members if isinstance(model, ModelEnsemble) else [model]
    return all(len(data) >= getattr(m, "batch_size", 1) for m in members)


def _agent_update(agent: QNetwork, d_real: ReplayBuffer, pool: SimPool, B: int, n_real: int, rng: np.random.Generator) -> None:
    """One DQN step on ``n_real`` real rows plus ``B - n_real`` simulated rows (all real if the pool is empty)."""
    if len(pool) == 0 or n_real >= B:
        dqn_update_batch(agent, *d_real.sample_batch(B, rng))
        return
    sim = pool.sample(B - n_real, rng)
    if n_real == 0:
        dqn_update_batch(agent, *sim)
        return
    real = d_real.sample_batch(n_real, rng)
    dqn_update_batch(agent, *(np.concatenate([x, y]) for x, y in zip(real, sim)))
