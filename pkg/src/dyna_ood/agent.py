"""Plain DQN: bootstrap targets from a frozen copy, semi-gradient TD updates, ε-greedy acting.

The update is exactly ``θ ← θ + α (y − Q(s,a;θ)) ∇θ Q(s,a;θ)`` with
``y = r + γ max_a' Q(s',a';θ⁻)``; minibatches average the per-sample steps.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Transition
from .errors import NumericalError
from .nn import MlpParams, init_mlp, mlp_backward, mlp_forward


class QNetwork:
    def __init__(self, theta: MlpParams, alpha: float = 1e-3, gamma: float = 0.99, sync_period: int = 100):
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if sync_period < 1:
            raise ValueError("sync_period must be >= 1")
        self.theta = theta
        self.theta_minus = theta.copy()
        self.alpha = alpha
        self.gamma = gamma
        self.sync_period = sync_period
        self.n_updates = 0
        self.n_syncs = 0

    @classmethod
    def build(
        cls,
        d_s: int,
        n_actions: int,
        rng: np.random.Generator,
        hidden: Sequence[int] = (64, 64),
        activation: str = "tanh",
        **kw,
    ) -> "QNetwork":
        return cls(init_mlp([d_s, *hidden, n_actions], rng, hidden=activation), **kw)

    @property
    def n_actions(self) -> int:
        return self.theta.n_out

    def q_values(self, s) -> np.ndarray:
        return mlp_forward(self.theta, s)

    def target_values(self, s) -> np.ndarray:
        return mlp_forward(self.theta_minus, s)

    def greedy(self, S) -> np.ndarray:
        """Argmax actions for a batch of states (np.argmax picks the lowest id on ties)."""
        return np.argmax(self.q_values(np.atleast_2d(S)), axis=1)

    def copy(self) -> "QNetwork":
        q = QNetwork(self.theta.copy(), self.alpha, self.gamma, self.sync_period)
        q.theta_minus = self.theta_minus.copy()
        q.n_updates, q.n_syncs = self.n_updates, self.n_syncs
        return q


def dqn_targets(q: QNetwork, r, s_next, done) -> np.ndarray:
    r = np.atleast_1d(np.asarray(r, dtype=np.float64))
    boot = np.max(q.target_values(np.atleast_2d(s_next)), axis=1)
    return r + q.gamma * boot * (1.0 - np.atleast_1d(done).astype(np.float64))


def dqn_target(q: QNetwork, t: Transition) -> float:
    return float(dqn_targets(q, t.r, t.s_next, t.done)[0])


def target_sync(q: QNetwork) -> QNetwork:
    q.theta_minus = q.theta.copy()
    q.n_syncs += 1
    return q


def update_direction(q: QNetwork, s, a, r, s_next, done) -> tuple[np.ndarray, np.ndarray]:
    """Mean of ``(y_i − Q_i) ∇θ Q_i`` over the batch, plus the TD errors."""
    S = np.atleast_2d(np.asarray(s, dtype=np.float64))
    a = np.atleast_1d(a).astype(np.int64)
    y = dqn_targets(q, r, s_next, done)
    Q = q.q_values(S)
    td = y - Q[np.arange(len(a)), a]
    up = np.zeros_like(Q)
    up[np.arange(len(a)), a] = td / len(a)
    grad, _ = mlp_backward(q.theta, S, up)
    return grad, td


def dqn_update_batch(q: QNetwork, s, a, r, s_next, done) -> np.ndarray:
    """One averaged update on a minibatch; returns the TD errors.

    θ⁻ is re-synced after every ``sync_period``-th update. Non-finite
    targets or gradients raise :class:`NumericalError` before θ is touched.
    """
    direction, td = update_direction(q, s, a, r, s_next, done)
    if not (np.all(np.isfinite(td)) and np.all(np.isfinite(direction))):
        raise NumericalError(f"non-finite TD error or gradient at update {q.n_updates}")
    q.theta = q.theta.with_flat(q.theta.flat() + q.alpha * direction)
    q.n_updates += 1
    if q.n_updates % q.sync_period == 0:
        target_sync(q)
    return td


def dqn_update(q: QNetwork, t: Transition) -> QNetwork:
    dqn_update_batch(q, t.s[None], [t.a], [t.r], t.s_next[None], [t.done])
    return q


def act_epsilon_greedy(q: QNetwork, s, eps: float, rng: np.random.Generator) -> int:
    """Uniform action with probability ``eps``, else the lowest-id argmax.

    Always consumes one uniform draw so the stream position does not depend
    on the Q-values.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    if rng.random() < eps:
        return int(rng.integers(q.n_actions))
    return int(np.argmax(q.q_values(s)))


def epsilon_schedule(step: int, total_steps: int, start: float = 1.0, end: float = 0.05, frac: float = 0.2) -> float:
    """Linear decay from ``start`` to ``end`` over the first ``frac`` of ``total_steps``."""
    span = max(frac * total_steps, 1.0)
    return float(end + (start - end) * max(0.0, 1.0 - step / span))
