"""Built-in environments: a torque-limited inverted pendulum and a linear-Gaussian system.

Both expose the same surface: ``reset``, ``step``, ``reward`` and
``is_terminal`` for single states, plus ``*_batch`` variants used by model
rollouts. Rewards are known functions of ``(s, a)`` so simulated
transitions are labelled exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ActionError, DimensionError


@dataclass(frozen=True)
class EnvSpec:
    d_s: int
    n_actions: int
    horizon: int
    gamma: float = 0.99

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")


class _Env:
    spec: EnvSpec
    state_low: np.ndarray
    state_high: np.ndarray

    @property
    def d_s(self) -> int:
        return self.spec.d_s

    @property
    def n_actions(self) -> int:
        return self.spec.n_actions

    def _check_action(self, a) -> np.ndarray:
        a = np.asarray(a)
        if a.dtype.kind not in "iu" or np.any(a < 0) or np.any(a >= self.n_actions):
            raise ActionError(f"action ids must be integers in [0, {self.n_actions}), got {a}")
        return a.astype(np.int64)

    def _check_state(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != self.d_s:
            raise DimensionError(f"expected state dim {self.d_s}, got {s.shape[-1]}")
        return s

    def sample_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Uniform draws from the full state box (used for pretraining data)."""
        return rng.uniform(self.state_low, self.state_high, size=(n, self.d_s))

    def reward(self, s, a) -> float:
        return float(self.reward_batch(self._check_state(s)[None], np.atleast_1d(a))[0])

    def is_terminal(self, s) -> bool:
        return bool(self.terminal_batch(self._check_state(s)[None])[0])

    def step(self, s, a, rng: np.random.Generator | None = None):
        """One real transition. Returns ``(s_next, r, done)``."""
        s = self._check_state(s)
        a = self._check_action(np.atleast_1d(a))
        s_next = self.step_batch(s[None], a, rng)[0]
        r = float(self.reward_batch(s[None], a)[0])
        return s_next, r, bool(self.terminal_batch(s_next[None])[0])


@dataclass
class DiscretePendulumEnv(_Env):
    """Inverted pendulum balanced with a finite set of torques.

    State is ``(theta, omega)`` with ``theta = 0`` upright. Dynamics are
    explicit Euler on ``omega' = g/l sin(theta) + u / (m l^2)``, fully
    deterministic; only the initial state is random. An episode terminates
    when the state leaves the angle/velocity box.
    """

    g: float = 9.8
    length: float = 1.0
    mass: float = 1.0
    torque_max: float = 5.0
    n_torques: int = 3
    dt: float = 0.05
    theta_max: float = 0.6
    omega_max: float = 4.0
    init_theta: float = 0.3
    init_omega: float = 0.3
    torque_cost: float = 0.01
    horizon: int = 200
    gamma: float = 0.99
    spec: EnvSpec = field(init=False)

    def __post_init__(self):
        if self.n_torques < 2:
            raise ValueError("need at least two torque levels")
        self.torques = np.linspace(-self.torque_max, self.torque_max, self.n_torques)
        self.spec = EnvSpec(2, self.n_torques, self.horizon, self.gamma)
        self.state_low = np.array([-self.theta_max, -self.omega_max])
        self.state_high = -self.state_low
        self.init_low = np.array([-self.init_theta, -self.init_omega])
        self.init_high = -self.init_low

    @property
    def reward_bound(self) -> float:
        """D1: the reward lies in ``[-torque_cost, 1]``."""
        return max(1.0, self.torque_cost)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.init_low, self.init_high)

    def step_batch(self, s, a, rng=None) -> np.ndarray:
        s = self._check_state(s)
        u = self.torques[self._check_action(a)]
        theta, omega = s[:, 0], s[:, 1]
        alpha = self.g / self.length * np.sin(theta) + u / (self.mass * self.length**2)
        return np.stack([theta + self.dt * omega, omega + self.dt * alpha], axis=1)

    def reward_batch(self, s, a) -> np.ndarray:
        s = self._check_state(s)
        u = self.torques[self._check_action(a)]
        theta = np.clip(s[:, 0], -self.theta_max, self.theta_max)
        return 1.0 - (theta / self.theta_max) ** 2 - self.torque_cost * (u / self.torque_max) ** 2

    def terminal_batch(self, s) -> np.ndarray:
        s = self._check_state(s)
        return (np.abs(s[:, 0]) > self.theta_max) | (np.abs(s[:, 1]) > self.omega_max)


@dataclass
class LinearGaussianEnv(_Env):
    """``s' ~ N(A s + B e_a, diag(sigma^2))`` with a linear, box-clipped reward.

    The true mean is exactly Lipschitz in the state-action key with
    constant ``||[A, B / w]||_2`` (``w`` the one-hot action weight) and the
    transition variance is constant, which makes every constant in the
    drift bounds available in closed form.
    """

    A: np.ndarray
    B: np.ndarray
    sigma: np.ndarray
    reward_w: np.ndarray
    reward_u: np.ndarray
    bound: float = 3.0
    init_low: np.ndarray | None = None
    init_high: np.ndarray | None = None
    horizon: int = 50
    gamma: float = 0.99
    spec: EnvSpec = field(init=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        d = self.A.shape[0]
        self.B = np.asarray(self.B, dtype=np.float64).reshape(d, -1)
        self.sigma = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (d,)).copy()
        self.reward_w = np.broadcast_to(np.asarray(self.reward_w, dtype=np.float64), (d,)).copy()
        n = self.B.shape[1]
        self.reward_u = np.broadcast_to(np.asarray(self.reward_u, dtype=np.float64), (n,)).copy()
        if self.A.shape != (d, d):
            raise DimensionError("A must be square")
        if np.any(self.sigma < 0):
            raise ValueError("sigma must be non-negative")
        self.spec = EnvSpec(d, n, self.horizon, self.gamma)
        self.state_low = np.full(d, -float(self.bound))
        self.state_high = -self.state_low
        self.init_low = np.zeros(d) if self.init_low is None else np.asarray(self.init_low, dtype=np.float64)
        self.init_high = self.init_low.copy() if self.init_high is None else np.asarray(self.init_high, dtype=np.float64)

    @classmethod
    def random(
        cls,
        d_s: int,
        n_actions: int,
        rng: np.random.Generator,
        a_norm: float = 0.9,
        b_scale: float = 0.5,
        sigma: float = 0.1,
        **kw,
    ) -> "LinearGaussianEnv":
        A = rng.normal(size=(d_s, d_s))
        A *= a_norm / np.linalg.norm(A, 2)
        B = b_scale * rng.normal(size=(d_s, n_actions))
        w = rng.normal(size=d_s) / np.sqrt(d_s)
        u = 0.1 * rng.normal(size=n_actions)
        return cls(A, B, np.full(d_s, sigma), w, u, **kw)

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        if np.array_equal(self.init_low, self.init_high):
            return self.init_low.copy()
        return rng.uniform(self.init_low, self.init_high)

    def mean(self, s, a) -> np.ndarray:
        s = self._check_state(np.atleast_2d(s))
        a = self._check_action(np.atleast_1d(a))
        return s @ self.A.T + self.B[:, a].T

    def variance(self, s=None, a=None) -> np.ndarray:
        return self.sigma**2

    def mean_lipschitz(self, action_weight: float = 1.0) -> float:
        """Operator norm of ``[A, B / w]``: exact Lipschitz constant of the mean."""
        return float(np.linalg.norm(np.hstack([self.A, self.B / action_weight]), 2))

    def reward_lipschitz(self, action_weight: float = 1.0) -> float:
        return float(np.linalg.norm(np.concatenate([self.reward_w, self.reward_u / action_weight])))

    @property
    def reward_bound(self) -> float:
        return float(np.abs(self.reward_w).sum() * self.bound + np.abs(self.reward_u).max())

    def step_batch(self, s, a, rng: np.random.Generator | None = None) -> np.ndarray:
        mu = self.mean(s, a)
        if rng is None or not np.any(self.sigma > 0):
            return mu
        return mu + self.sigma * rng.standard_normal(mu.shape)

    def reward_batch(self, s, a) -> np.ndarray:
        s = np.clip(self._check_state(np.atleast_2d(s)), -self.bound, self.bound)
        return s @ self.reward_w + self.reward_u[self._check_action(np.atleast_1d(a))]

    def terminal_batch(self, s) -> np.ndarray:
        return np.zeros(np.atleast_2d(s).shape[0], dtype=bool)


def make_env(name: str, **params) -> _Env:
    """Build an environment by config name (``pendulum`` or ``lingauss``)."""
    if name == "pendulum":
        return DiscretePendulumEnv(**params)
    if name == "lingauss":
        params = dict(params)
        seed = params.pop("seed", 0)
        d_s = params.pop("d_s", 4)
        n_actions = params.pop("n_actions", 3)
        return LinearGaussianEnv.random(d_s, n_actions, np.random.default_rng(seed), **params)
    raise ValueError(f"unknown environment {name!r}")
