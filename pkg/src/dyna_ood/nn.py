"""A small numpy multilayer perceptron with an explicit reverse pass.

Used for both the Q-network and the learned transition model. Also hosts
the sampled Lipschitz / sup-norm estimators needed by the bound harness.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateSampleError, DimensionError

ACTIVATIONS = ("tanh", "relu", "linear")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (z > 0.0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class MlpParams:
    """Weights ``W[l]`` of shape ``(out, in)``, biases ``b[l]`` and one activation per layer."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise DimensionError("weights, biases and activations must have equal length")
        for l, (W, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise DimensionError(f"layer {l}: bad shapes {W.shape}, {b.shape}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise DimensionError(f"layer {l} input {W.shape[1]} != previous output")

    @property
    def n_in(self) -> int:
        return self.weights[0].shape[1]

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(W.size + b.size for W, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([x.ravel() for W, b in zip(self.weights, self.biases) for x in (W, b)])

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        """Structured copy of this architecture holding the flat vector ``theta``."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {theta.shape}")
        Ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[i : i + W.size].reshape(W.shape).copy())
            i += W.size
            bs.append(theta[i : i + b.size].copy())
            i += b.size
        return MlpParams(Ws, bs, list(self.activations))

    def copy(self) -> "MlpParams":
        return MlpParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], list(self.activations))

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(W)) and np.all(np.isfinite(b)) for W, b in zip(self.weights, self.biases))


def init_mlp(
    sizes: Sequence[int],
    rng: np.random.Generator,
    hidden: str = "tanh",
    output: str = "linear",
    out_scale: float = 1.0,
) -> MlpParams:
    """Glorot-uniform weights, zero biases. ``out_scale`` shrinks the last layer."""
    Ws, bs, acts = [], [], []
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        lim = np.sqrt(6.0 / (n_in + n_out))
        W = rng.uniform(-lim, lim, size=(n_out, n_in))
        last = l == len(sizes) - 2
        if last:
            W *= out_scale
        Ws.append(W)
        bs.append(np.zeros(n_out))
        acts.append(output if last else hidden)
    return MlpParams(Ws, bs, acts)


def _forward_trace(p: MlpParams, X: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
    if X.shape[-1] != p.n_in:
        raise DimensionError(f"input dim {X.shape[-1]} != {p.n_in}")
    hs, zs = [X], []
    h = X
    for W, b, act in zip(p.weights, p.biases, p.activations):
        z = h @ W.T + b
        h = _act(act, z)
        zs.append(z)
        hs.append(h)
    return hs, zs


def mlp_forward(p: MlpParams, x: np.ndarray) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    hs, _ = _forward_trace(p, np.atleast_2d(x))
    return hs[-1][0] if x.ndim == 1 else hs[-1]


def mlp_backward(p: MlpParams, x: np.ndarray, upstream: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass. Returns ``(flat parameter gradient, output)``.

    The gradient is that of ``sum_rows(upstream * output)``; for a single
    input this is the vector-Jacobian product ``upstream^T dOut/dtheta``.
    """
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    U = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    hs, zs = _forward_trace(p, X)
    if U.shape != hs[-1].shape:
        raise DimensionError(f"upstream shape {U.shape} != output shape {hs[-1].shape}")
    grads = []
    delta = U
    for l in range(len(p.weights) - 1, -1, -1):
        delta = delta * _act_grad(p.activations[l], zs[l], hs[l + 1])
        grads.append((delta.sum(axis=0), delta.T @ hs[l]))
        if l:
            delta = delta @ p.weights[l]
    flat = np.concatenate([x for gb, gW in reversed(grads) for x in (gW.ravel(), gb)])
    out = hs[-1][0] if np.ndim(x) == 1 else hs[-1]
    return flat, out


def mlp_per_sample_grads(p: MlpParams, X: np.ndarray, U: np.ndarray) -> np.ndarray:
    """Row ``i`` is the flat gradient of ``U[i] . f(X[i])``; shape ``(n, n_params)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    hs, zs = _forward_trace(p, X)
    if U.shape != hs[-1].shape:
        raise DimensionError(f"upstream shape {U.shape} != output shape {hs[-1].shape}")
    blocks = []
    delta = U
    for l in range(len(p.weights) - 1, -1, -1):
        delta = delta * _act_grad(p.activations[l], zs[l], hs[l + 1])
        gW = delta[:, :, None] * hs[l][:, None, :]
        blocks.append((gW.reshape(len(X), -1), delta))
        if l:
            delta = delta @ p.weights[l]
    return np.concatenate([x for gW, gb in reversed(blocks) for x in (gW, gb)], axis=1)


def mlp_grad(p: MlpParams, x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Flat gradient of ``upstream . mlp_forward(p, x)`` with respect to theta."""
    return mlp_backward(p, x, upstream)[0]


def spectral_norms(p: MlpParams) -> np.ndarray:
    return np.array([np.linalg.norm(W, 2) for W in p.weights])


def clip_spectral(p: MlpParams, cap: float) -> MlpParams:
    """Rescale each layer so its operator norm is at most ``cap`` (in place)."""
    for l, W in enumerate(p.weights):
        n = np.linalg.norm(W, 2)
        if n > cap:
            p.weights[l] = W * (cap / n)
    return p


class Adam:
    """Adam on a flat parameter vector."""

    def __init__(self, n: int, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return theta - self.lr * mhat / (np.sqrt(vhat) + self.eps)


Sampler = Callable[[np.random.Generator, int], np.ndarray]


def max_lipschitz_ratio(f: Callable[[np.ndarray], np.ndarray], X: np.ndarray, Y: np.ndarray, min_dist: float = 1e-9) -> float:
    """Largest ``||f(x) - f(y)|| / ||x - y||`` over row pairs, skipping near-duplicates."""
    dx = np.linalg.norm(X - Y, axis=1)
    keep = dx >= min_dist
    if not np.any(keep):
        raise DegenerateSampleError("all sampled pairs are degenerate")
    fx = np.asarray(f(X[keep]), dtype=np.float64).reshape(int(keep.sum()), -1)
    fy = np.asarray(f(Y[keep]), dtype=np.float64).reshape(int(keep.sum()), -1)
    return float(np.max(np.linalg.norm(fx - fy, axis=1) / dx[keep]))


def estimate_lipschitz(
    f: Callable[[np.ndarray], np.ndarray],
    sampler: Sampler,
    n_pairs: int,
    safety: float = 1.2,
    rng: np.random.Generator | None = None,
) -> float:
    """Sampled lower estimate of the Lipschitz constant of ``f``, inflated by ``safety``.

    ``f`` maps a batch of rows to a batch of outputs; ``sampler(rng, n)``
    returns ``n`` domain points as rows.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    if safety < 1.0:
        raise ValueError("safety must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.asarray(sampler(rng, n_pairs), dtype=np.float64)
    Y = np.asarray(sampler(rng, n_pairs), dtype=np.float64)
    return safety * max_lipschitz_ratio(f, X, Y)


def estimate_sup_norm(
    f: Callable[[np.ndarray], np.ndarray],
    sampler: Sampler,
    n: int,
    rng: np.random.Generator | None = None,
) -> float:
    """Max of ``||f(x)||`` over ``n`` sampled domain points."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    X = np.asarray(sampler(rng, n), dtype=np.float64)
    fx = np.asarray(f(X), dtype=np.float64).reshape(X.shape[0], -1)
    return float(np.max(np.linalg.norm(fx, axis=1)))
