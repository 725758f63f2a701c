import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyna_ood.env import LinearGaussianEnv
from dyna_ood.errors import DegenerateSampleError, DimensionError
from dyna_ood.nn import (
    Adam,
    MlpParams,
    clip_spectral,
    estimate_lipschitz,
    estimate_sup_norm,
    init_mlp,
    mlp_backward,
    mlp_forward,
    mlp_grad,
    mlp_per_sample_grads,
    spectral_norms,
)


def oracle_forward(p: MlpParams, x):
    """Straight-line re-evaluation, one scalar at a time."""
    h = list(map(float, x))
    for W, b, act in zip(p.weights, p.biases, p.activations):
        z = [sum(W[i, j] * h[j] for j in range(len(h))) + b[i] for i in range(W.shape[0])]
        h = [np.tanh(v) if act == "tanh" else max(v, 0.0) if act == "relu" else v for v in z]
    return np.array(h)


def fd_grad(p, x, u, h=1e-5):
    theta = p.flat()
    g = np.empty_like(theta)
    for i in range(len(theta)):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        g[i] = (u @ mlp_forward(p.with_flat(tp), x) - u @ mlp_forward(p.with_flat(tm), x)) / (2 * h)
    return g


nets = st.builds(
    lambda seed, sizes, act: init_mlp(sizes, np.random.default_rng(seed), hidden=act),
    st.integers(0, 2**31),
    st.lists(st.integers(1, 5), min_size=2, max_size=4),
    st.sampled_from(["tanh", "linear"]),
)


class TestForward:
    def test_zero_network(self):
        p = MlpParams([np.zeros((3, 2))], [np.zeros(3)], ["linear"])
        assert np.array_equal(mlp_forward(p, [1.0, -2.0]), np.zeros(3))

    def test_affine_by_hand(self):
        p = MlpParams([np.array([[2.0]])], [np.array([1.0])], ["linear"])
        assert mlp_forward(p, [3.0]).tolist() == [7.0]

    @given(p=nets, seed=st.integers(0, 2**31))
    def test_matches_scalar_oracle(self, p, seed):
        x = np.random.default_rng(seed).normal(size=p.n_in)
        assert np.allclose(mlp_forward(p, x), oracle_forward(p, x), rtol=0, atol=1e-12)

    def test_relu_layer(self, rng):
        p = init_mlp([3, 4, 2], rng, hidden="relu")
        x = rng.normal(size=3)
        assert np.allclose(mlp_forward(p, x), oracle_forward(p, x), atol=1e-12)

    def test_batch_rows_equal_single_calls(self, rng):
        p = init_mlp([3, 5, 2], rng)
        X = rng.normal(size=(4, 3))
        assert np.allclose(mlp_forward(p, X), np.stack([mlp_forward(p, x) for x in X]), atol=1e-15)

    def test_dimension_errors(self, rng):
        p = init_mlp([3, 2], rng)
        with pytest.raises(DimensionError):
            mlp_forward(p, np.zeros(4))
        with pytest.raises(DimensionError):
            mlp_backward(p, np.zeros(3), np.zeros(3))
        with pytest.raises(DimensionError):
            MlpParams([np.zeros((2, 3)), np.zeros((2, 3))], [np.zeros(2)] * 2, ["tanh", "linear"])
        with pytest.raises(DimensionError):
            p.with_flat(np.zeros(p.n_params + 1))


class TestGradient:
    def test_linear_layer_weight_gradient_is_input(self):
        p = MlpParams([np.array([[0.3, -0.7]])], [np.array([0.1])], ["linear"])
        x = np.array([2.0, 5.0])
        g = mlp_grad(p, x, np.array([1.0]))
        assert g.tolist() == [2.0, 5.0, 1.0]

    def test_zero_upstream(self, rng):
        p = init_mlp([3, 4, 2], rng)
        assert not np.any(mlp_grad(p, rng.normal(size=3), np.zeros(2)))

    @given(p=nets, seed=st.integers(0, 2**31))
    def test_finite_differences(self, p, seed):
        r = np.random.default_rng(seed)
        x, u = r.normal(size=p.n_in), r.normal(size=p.n_out)
        g, fd = mlp_grad(p, x, u), fd_grad(p, x, u)
        assert np.all(np.abs(g - fd) <= 1e-5 * np.maximum(np.abs(fd), 1.0))

    def test_per_sample_rows_sum_to_batch_gradient(self, rng):
        p = init_mlp([3, 6, 2], rng)
        X, U = rng.normal(size=(7, 3)), rng.normal(size=(7, 2))
        G = mlp_per_sample_grads(p, X, U)
        assert G.shape == (7, p.n_params)
        assert np.allclose(G.sum(0), mlp_backward(p, X, U)[0], atol=1e-12)
        assert np.allclose(G[3], mlp_grad(p, X[3], U[3]), atol=1e-12)

    def test_flat_roundtrip(self, rng):
        p = init_mlp([2, 3, 1], rng)
        q = p.with_flat(p.flat())
        assert all(np.array_equal(a, b) for a, b in zip(p.weights, q.weights))
        assert p.n_params == 2 * 3 + 3 + 3 + 1


class TestLipschitz:
    box = staticmethod(lambda r, n: r.uniform(-1, 1, size=(n, 3)))

    def test_linear_map_times_safety(self, rng):
        assert np.isclose(estimate_lipschitz(lambda X: 2 * X, self.box, 100, safety=1.3, rng=rng), 2.6)

    def test_constant_map(self, rng):
        assert estimate_lipschitz(lambda X: np.ones((len(X), 2)), self.box, 100, rng=rng) == 0.0

    def test_degenerate_pairs(self, rng):
        with pytest.raises(DegenerateSampleError):
            estimate_lipschitz(lambda X: X, lambda r, n: np.zeros((n, 2)), 10, rng=rng)

    def test_argument_checks(self):
        with pytest.raises(ValueError):
            estimate_lipschitz(lambda X: X, self.box, 1)
        with pytest.raises(ValueError):
            estimate_lipschitz(lambda X: X, self.box, 10, safety=0.9)

    def test_true_mean_of_linear_gaussian(self):
        env = LinearGaussianEnv.random(4, 3, np.random.default_rng(7))
        M = np.hstack([env.A, env.B])
        # operator norm by power iteration on M^T M
        v = np.ones(M.shape[1])
        for _ in range(500):
            v = M.T @ (M @ v)
            v /= np.linalg.norm(v)
        op = np.linalg.norm(M @ v)

        # continuous relaxation of the key: the map is linear in (s, e)
        def sampler(r, n):
            return r.normal(size=(n, 7))

        est = estimate_lipschitz(lambda K: K @ M.T, sampler, 10_000, safety=1.0, rng=np.random.default_rng(1))
        assert 0.9 * op <= est <= op * (1 + 1e-12)


class TestSupNorm:
    def test_constant(self, rng):
        c = np.array([3.0, 4.0])
        assert estimate_sup_norm(lambda X: np.tile(c, (len(X), 1)), lambda r, n: r.normal(size=(n, 2)), 10, rng) == 5.0

    def test_identity_on_unit_box(self):
        d = 3
        sampler = lambda r, n: r.uniform(-1, 1, size=(n, d))  # noqa: E731
        small = estimate_sup_norm(lambda X: X, sampler, 10, np.random.default_rng(0))
        big = estimate_sup_norm(lambda X: X, sampler, 100_000, np.random.default_rng(0))
        assert small <= big <= np.sqrt(d)
        assert big > 0.95 * np.sqrt(d)


def test_spectral_clip(rng):
    p = init_mlp([4, 8, 2], rng)
    p.weights[0] *= 10
    clip_spectral(p, 1.5)
    assert np.all(spectral_norms(p) <= 1.5 + 1e-12)


def test_adam_minimises_quadratic():
    opt = Adam(2, lr=0.05)
    theta = np.array([3.0, -2.0])
    for _ in range(2000):
        theta = opt.step(theta, 2 * theta)
    assert np.allclose(theta, 0.0, atol=1e-3)
