"""Estimated transition models producing diagonal-Gaussian next-state predictions.

Three estimators share one prediction surface (``predict`` for a single
query, ``predict_batch`` for rollouts):

* ``KdeModel``: kernel-weighted mean and variance of logged next states,
  with the kernel mass at the query as effective sample size.
* ``MlpGaussianModel``: a network with mean and log-variance heads fitted by
  minibatch Adam on the Gaussian negative log-likelihood.
* ``ModelEnsemble``: ``B`` MLP members, one picked uniformly per prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ReplayBuffer, one_hot, state_action_keys
from .errors import DimensionError, InsufficientDataError, NoSupportError
from .nn import Adam, MlpParams, init_mlp, mlp_backward, mlp_forward

VAR_FLOOR = 1e-6
VAR_CEILING = 10.0


@dataclass
class GaussianPrediction:
    mean: np.ndarray
    var: np.ndarray

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + np.sqrt(self.var) * rng.standard_normal(self.mean.shape)


def clamp_var(var, floor: float = VAR_FLOOR, ceiling: float = VAR_CEILING) -> np.ndarray:
    return np.clip(var, floor, ceiling)


def median_bandwidth(keys: np.ndarray, rng: np.random.Generator | None = None, n_sub: int = 512) -> float:
    """Median pairwise distance of (a subsample of) the support keys."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] > n_sub:
        rng = np.random.default_rng(0) if rng is None else rng
        keys = keys[rng.choice(keys.shape[0], n_sub, replace=False)]
    n = keys.shape[0]
    if n < 2:
        return 1.0
    iu = np.triu_indices(n, 1)
    d = np.linalg.norm(keys[:, None, :] - keys[None, :, :], axis=-1)[iu]
    h = float(np.median(d))
    return h if h > 0 else 1.0


class KdeModel:
    """Kernel estimate of the next-state mean/variance around a state-action key.

    With ``kernel="indicator"`` a support point contributes iff its key is
    exactly equal to the query key, which turns the estimate into the
    empirical mean/variance over repeated visits. With ``"gaussian"`` the
    weight is ``exp(-||x||^2 / (2 h^2))``. One shared weight is used for all
    state dimensions.
    """

    def __init__(
        self,
        n_actions: int,
        kernel: str = "gaussian",
        bandwidth: float | None = None,
        action_weight: float = 1.0,
        var_floor: float = VAR_FLOOR,
        var_ceiling: float = VAR_CEILING,
        max_support: int | None = None,
        rng: np.random.Generator | None = None,
    ):
        if kernel not in ("gaussian", "indicator"):
            raise ValueError(f"unknown kernel {kernel!r}")
        if bandwidth is not None and bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.n_actions = n_actions
        self.kernel = kernel
        self.bandwidth = bandwidth
        self.action_weight = action_weight
        self.var_floor = var_floor
        self.var_ceiling = var_ceiling
        self.max_support = max_support
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.keys = np.empty((0, 0))
        self.next_states = np.empty((0, 0))
        self.fitted = False

    @property
    def d_s(self) -> int:
        return self.next_states.shape[1]

    def set_support(self, s: np.ndarray, a: np.ndarray, s_next: np.ndarray) -> "KdeModel":
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        self.keys = state_action_keys(s, a, self.n_actions, self.action_weight)
        self.next_states = np.atleast_2d(np.asarray(s_next, dtype=np.float64))
        if self.kernel == "gaussian" and self.bandwidth is None and len(self.keys):
            self.bandwidth = median_bandwidth(self.keys, self.rng)
        self.fitted = len(self.keys) > 0
        return self

    def fit(self, data: ReplayBuffer, epochs: int | None = None) -> "KdeModel":
        s, a, _, s2, _ = data.arrays()
        if self.max_support and len(s) > self.max_support:
            idx = np.sort(self.rng.choice(len(s), self.max_support, replace=False))
            s, a, s2 = s[idx], a[idx], s2[idx]
        return self.set_support(s, a, s2)

    def _weights(self, query_keys: np.ndarray) -> np.ndarray:
        if self.kernel == "indicator":
            return np.all(query_keys[:, None, :] == self.keys[None, :, :], axis=-1).astype(np.float64)
        sq = ((query_keys[:, None, :] - self.keys[None, :, :]) ** 2).sum(axis=-1)
        return np.exp(-sq / (2.0 * self.bandwidth**2))

    def weights(self, s, a) -> np.ndarray:
        if len(self.keys) == 0:
            return np.zeros(0)
        return self._weights(state_action_keys(s, a, self.n_actions, self.action_weight))[0]

    def effective_sample_size(self, s, a) -> float:
        return float(self.weights(s, a).sum())

    def moments(self, s, a) -> tuple[np.ndarray, np.ndarray, float]:
        """Unclamped ``(mean, var, n_eff)`` at one query."""
        w = self.weights(s, a)
        n_eff = float(w.sum())
        if n_eff <= 0.0:
            raise NoSupportError("no kernel mass at query")
        mean = (w @ self.next_states) / n_eff
        var = (w @ (self.next_states - mean) ** 2) / n_eff
        return mean, var, n_eff

    def estimate(self, s, a) -> GaussianPrediction:
        mean, var, _ = self.moments(s, a)
        return GaussianPrediction(mean, clamp_var(var, self.var_floor, self.var_ceiling))

    def predict(self, s, a, rng: np.random.Generator):
        pred = self.estimate(s, a)
        return pred, pred.sample(rng)

    def raw_moments_batch(self, S, A) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Unclamped ``(mean, var, n_eff)`` per query; rows without kernel mass are NaN."""
        W = self._weights(state_action_keys(S, A, self.n_actions, self.action_weight))
        n_eff = W.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            mean = (W @ self.next_states) / n_eff[:, None]
            var = np.einsum("qn,qnd->qd", W, (self.next_states[None] - mean[:, None]) ** 2) / n_eff[:, None]
        return mean, var, n_eff

    def moments_batch(self, S, A, deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
        Q = state_action_keys(S, A, self.n_actions, self.action_weight)
        W = self._weights(Q)
        n_eff = W.sum(axis=1)
        if np.any(n_eff <= 0.0):
            raise NoSupportError("no kernel mass at some rollout queries")
        mean = (W @ self.next_states) / n_eff[:, None]
        var = np.einsum("qn,qnd->qd", W, (self.next_states[None] - mean[:, None]) ** 2) / n_eff[:, None]
        if deterministic:
            return mean, np.full_like(mean, self.var_floor)
        return mean, clamp_var(var, self.var_floor, self.var_ceiling)

    def predict_batch(self, S, A, rng: np.random.Generator, deterministic: bool = False):
        mean, var = self.moments_batch(S, A, deterministic)
        return mean, var, mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class MlpGaussianModel:
    """Diagonal-Gaussian dynamics network predicting the next-state delta.

    Inputs are the normalised state and a one-hot action; outputs are the
    normalised mean delta and a log-variance softly bounded to
    ``[min_logvar, max_logvar]``. Predicted variances are finally clamped
    to ``[var_floor, var_ceiling]`` in state units.

    When ``lipschitz_cap`` is set, every optimiser step is followed by a
    rescaling of the weights so that the certified Lipschitz constant of
    the predicted mean (w.r.t. the ``(s, w*e_a)`` key) stays below the cap.
    """

    def __init__(
        self,
        d_s: int,
        n_actions: int,
        rng: np.random.Generator,
        hidden: tuple[int, ...] = (64, 64),
        activation: str = "tanh",
        lr: float = 1e-3,
        batch_size: int = 128,
        epochs: int = 20,
        var_floor: float = VAR_FLOOR,
        var_ceiling: float = VAR_CEILING,
        lipschitz_cap: float = 0.0,
        action_weight: float = 1.0,
        min_logvar: float = -10.0,
        max_logvar: float = 1.0,
    ):
        self.d_s, self.n_actions = d_s, n_actions
        self.rng = rng
        self.lr, self.batch_size, self.epochs = lr, batch_size, epochs
        self.var_floor, self.var_ceiling = var_floor, var_ceiling
        self.lipschitz_cap = lipschitz_cap
        self.action_weight = action_weight
        self.min_logvar, self.max_logvar = min_logvar, max_logvar
        self.params: MlpParams = init_mlp((d_s + n_actions, *hidden, 2 * d_s), rng, hidden=activation, out_scale=0.1)
        self.in_mean = np.zeros(d_s)
        self.in_std = np.ones(d_s)
        self.out_mean = np.zeros(d_s)
        self.out_std = np.ones(d_s)
        self._opt = Adam(self.params.n_params, lr)
        self.fitted = False
        self.last_loss = float("nan")

    def _inputs(self, S, A) -> np.ndarray:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        if S.shape[1] != self.d_s:
            raise DimensionError(f"expected state dim {self.d_s}, got {S.shape[1]}")
        return np.concatenate([(S - self.in_mean) / self.in_std, one_hot(np.atleast_1d(A), self.n_actions)], axis=1)

    def _heads(self, out: np.ndarray):
        d = self.d_s
        raw = out[:, d:]
        lv1 = self.max_logvar - _softplus(self.max_logvar - raw)
        logvar = self.min_logvar + _softplus(lv1 - self.min_logvar)
        dlv = _sigmoid(self.max_logvar - raw) * _sigmoid(lv1 - self.min_logvar)
        return out[:, :d], logvar, dlv

    def certified_lipschitz(self) -> float:
        """Upper bound on the Lipschitz constant of the predicted mean."""
        norms = [np.linalg.norm(W, 2) for W in self.params.weights[:-1]]
        norms.append(np.linalg.norm(self.params.weights[-1][: self.d_s], 2))
        in_scale = max(np.max(1.0 / self.in_std), 1.0 / self.action_weight)
        return 1.0 + float(np.max(self.out_std) * in_scale * np.prod(norms))

    def _enforce_cap(self) -> None:
        target = self.lipschitz_cap - 1.0
        if target <= 0:
            raise ValueError("lipschitz_cap must exceed 1 for a residual model")
        bound = self.certified_lipschitz() - 1.0
        if bound <= target:
            return
        n_layers = len(self.params.weights)
        f = (target / bound) ** (1.0 / n_layers) * (1.0 - 1e-9)
        for l in range(n_layers - 1):
            self.params.weights[l] = self.params.weights[l] * f
        self.params.weights[-1][: self.d_s] *= f

    def _set_normalisers(self, S: np.ndarray, S2: np.ndarray) -> None:
        self.in_mean = S.mean(axis=0)
        self.in_std = np.maximum(S.std(axis=0), 1e-6)
        delta = S2 - S
        self.out_mean = delta.mean(axis=0)
        self.out_std = np.maximum(delta.std(axis=0), 1e-6)

    def fit(self, data: ReplayBuffer, epochs: int | None = None) -> "MlpGaussianModel":
        """Minibatch Adam on the Gaussian NLL of ``s' - s`` given ``(s, a)``."""
        epochs = self.epochs if epochs is None else epochs
        if len(data) < self.batch_size:
            raise InsufficientDataError(f"need at least {self.batch_size} transitions, have {len(data)}")
        if epochs == 0:
            return self
        S, A, _, S2, _ = data.arrays()
        self._set_normalisers(S, S2)
        X = self._inputs(S, A)
        Y = ((S2 - S) - self.out_mean) / self.out_std
        n = len(X)
        theta = self.params.flat()
        for _ in range(epochs):
            order = self.rng.permutation(n)
            for start in range(0, n - self.batch_size + 1, self.batch_size):
                idx = order[start : start + self.batch_size]
                out = mlp_forward(self.params, X[idx])
                mean, logvar, dlv = self._heads(out)
                inv = np.exp(-logvar)
                err = Y[idx] - mean
                up = np.concatenate([-err * inv, 0.5 * (1.0 - err * err * inv) * dlv], axis=1) / len(idx)
                grad, _ = mlp_backward(self.params, X[idx], up)
                theta = self._opt.step(theta, grad)
                self.params = self.params.with_flat(theta)
                if self.lipschitz_cap > 0:
                    self._enforce_cap()
                    theta = self.params.flat()
                self.last_loss = float(0.5 * np.mean(np.sum(err * err * inv + logvar, axis=1)))
        self.fitted = True
        return self

    def moments_batch(self, S, A, deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Predicted means and clamped variances, one row per query."""
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        mean_n, logvar, _ = self._heads(mlp_forward(self.params, self._inputs(S, A)))
        mean = S + self.out_mean + self.out_std * mean_n
        if deterministic:
            return mean, np.full_like(mean, self.var_floor)
        return mean, clamp_var(np.exp(logvar) * self.out_std**2, self.var_floor, self.var_ceiling)

    def predict_batch(self, S, A, rng: np.random.Generator, deterministic: bool = False):
        mean, var = self.moments_batch(S, A, deterministic)
        return mean, var, mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def mean_fn(self, keys: np.ndarray) -> np.ndarray:
        """Predicted mean as a function of ``(s, w*e_a)`` key rows."""
        keys = np.atleast_2d(keys)
        S = keys[:, : self.d_s]
        X = np.concatenate([(S - self.in_mean) / self.in_std, keys[:, self.d_s :] / self.action_weight], axis=1)
        mean_n, _, _ = self._heads(mlp_forward(self.params, X))
        return S + self.out_mean + self.out_std * mean_n

    def predict(self, s, a, rng: np.random.Generator):
        mean, var, sample = self.predict_batch(np.atleast_2d(s), np.atleast_1d(a), rng)
        return GaussianPrediction(mean[0], var[0]), sample[0]

    def nll(self, data: ReplayBuffer) -> float:
        """Mean Gaussian NLL (state units, without the constant) of ``data``."""
        S, A, _, S2, _ = data.arrays()
        mean, var, _ = self.predict_batch(S, A, np.random.default_rng(0))
        return float(0.5 * np.mean(np.sum((S2 - mean) ** 2 / var + np.log(var), axis=1)))


class ModelEnsemble:
    """``B`` member models; each prediction uses one member chosen uniformly.

    Member choice draws from the ensemble's own stream so that the sample
    noise stream passed to ``predict`` is consumed exactly as by a single
    member.
    """

    def __init__(self, members: list, select_rng: np.random.Generator):
        if not members:
            raise ValueError("ensemble needs at least one member")
        dims = {(m.d_s, m.n_actions) for m in members}
        if len(dims) != 1:
            raise DimensionError("ensemble members must share input/output dimensions")
        self.members = members
        self.select_rng = select_rng

    @property
    def fitted(self) -> bool:
        return all(m.fitted for m in self.members)

    @property
    def d_s(self) -> int:
        return self.members[0].d_s

    @property
    def n_actions(self) -> int:
        return self.members[0].n_actions

    def fit(self, data: ReplayBuffer, epochs: int | None = None) -> "ModelEnsemble":
        for m in self.members:
            m.fit(data, epochs)
        return self

    def predict(self, s, a, rng: np.random.Generator):
        m = self.members[int(self.select_rng.integers(len(self.members)))]
        return m.predict(s, a, rng)

    def moments_batch(self, S, A, deterministic: bool = False) -> tuple[np.ndarray, np.ndarray]:
        S = np.atleast_2d(np.asarray(S, dtype=np.float64))
        A = np.atleast_1d(A)
        pick = self.select_rng.integers(len(self.members), size=len(S))
        mean = np.empty(S.shape)
        var = np.empty(S.shape)
        for j, m in enumerate(self.members):
            rows = pick == j
            if np.any(rows):
                mean[rows], var[rows] = m.moments_batch(S[rows], A[rows], deterministic)
        return mean, var

    def predict_batch(self, S, A, rng: np.random.Generator, deterministic: bool = False):
        mean, var = self.moments_batch(S, A, deterministic)
        return mean, var, mean + np.sqrt(var) * rng.standard_normal(mean.shape)

    def nll(self, data: ReplayBuffer) -> float:
        return float(np.mean([m.nll(data) for m in self.members]))

    @property
    def last_loss(self) -> float:
        return float(np.mean([m.last_loss for m in self.members]))
