import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dyna_ood.errors import DimensionError, EmptyIndexError
from dyna_ood.index import ExactIndex, HnswIndex, make_index, sq_dists
from oracles import brute_force_nn

KINDS = [ExactIndex, HnswIndex]


@pytest.mark.parametrize("kind", KINDS)
class TestBothIndexes:
    def test_first_insert_is_entry_and_self_query_is_zero(self, kind):
        idx = kind(3)
        p = np.array([0.5, -1.0, 2.0])
        assert idx.insert(p) == 0
        assert idx.nn_distance(p) == (0.0, 0)
        if kind is HnswIndex:
            assert idx.entry == 0

    def test_two_point_geometry(self, kind):
        idx = kind(2)
        idx.insert_batch([[0.0, 0.0], [1.0, 1.0]])
        d, i = idx.nn_distance([0.4, 0.4])
        assert i == 0 and d == pytest.approx(np.sqrt(0.32), abs=1e-15)

    def test_singleton(self, kind, rng):
        p, q = rng.normal(size=4), rng.normal(size=4)
        idx = kind(4)
        idx.insert(p)
        assert idx.nn_distance(q)[0] == pytest.approx(np.linalg.norm(p - q), rel=1e-15)

    def test_duplicates_return_lowest_id(self, kind):
        idx = kind(2)
        for _ in range(5):
            idx.insert([1.0, 1.0])
        assert idx.nn_distance([1.0, 1.0]) == (0.0, 0)

    def test_empty_index(self, kind):
        with pytest.raises(EmptyIndexError):
            kind(2).nn_distance([0.0, 0.0])

    def test_dimension_mismatch(self, kind):
        idx = kind(2)
        with pytest.raises(DimensionError):
            idx.insert([1.0, 2.0, 3.0])
        idx.insert([1.0, 2.0])
        with pytest.raises(DimensionError):
            idx.nn_distance([1.0])

    def test_inserted_points_query_to_zero(self, kind, rng):
        P = rng.normal(size=(300, 3))
        idx = kind(3)
        idx.insert_batch(P)
        d, _ = idx.nn_distance_batch(P)
        assert np.all(d == 0.0)
        assert np.array_equal(idx.points, P)


@given(seed=st.integers(0, 2**31), n=st.integers(1, 300), dim=st.integers(1, 6))
def test_exact_matches_brute_force(seed, n, dim):
    rng = np.random.default_rng(seed)
    # coarse grid so that ties actually occur
    P = rng.integers(-3, 4, size=(n, dim)).astype(float)
    Q = rng.integers(-3, 4, size=(20, dim)).astype(float)
    idx = ExactIndex(dim, chunk=7)
    idx.insert_batch(P)
    d, ids = idx.nn_distance_batch(Q)
    for q, dq, iq in zip(Q, d, ids):
        bd, bi = brute_force_nn(P, q)
        assert dq == bd and iq == bi


@given(seed=st.integers(0, 2**31), n=st.integers(1, 400))
def test_hnsw_never_reports_below_exact(seed, n):
    rng = np.random.default_rng(seed)
    P, Q = rng.normal(size=(n, 3)), rng.normal(size=(30, 3))
    h, e = HnswIndex(3, m_link=4, ef_construction=16, ef_search=2, rng=rng), ExactIndex(3)
    h.insert_batch(P)
    e.insert_batch(P)
    assert np.all(h.nn_distance_batch(Q)[0] >= e.nn_distance_batch(Q)[0])


def test_sq_dists_matches_scalar_loop(rng):
    P, q = rng.normal(size=(50, 7)), rng.normal(size=7)
    ref = [sum((P[i, j] - q[j]) ** 2 for j in range(7)) for i in range(50)]
    assert np.array_equal(sq_dists(P, q), np.array(ref))


class TestHnswStructure:
    def test_graph_connected_and_degree_bounded(self, rng):
        h = HnswIndex(4, m_link=6, rng=rng)
        h.insert_batch(rng.normal(size=(2000, 4)))
        assert h.reachable_count(0) == len(h)
        assert max(len(h.neighbors(i)) for i in range(len(h))) <= 12
        top = [i for i in range(len(h)) if h.levels[i] >= 1]
        assert all(len(h.neighbors(i, 1)) <= 6 for i in top)
        assert h.levels[h.entry] == h.max_level == h.levels.max()

    def test_level_distribution_is_geometric(self):
        h = HnswIndex(2, m_link=16, rng=np.random.default_rng(0))
        levels = np.array([h._draw_level() for _ in range(50_000)])
        # P(level >= 1) = exp(-1/m_l) = 1/m_link
        p = (levels >= 1).mean()
        assert abs(p - 1 / 16) < 4 * np.sqrt((1 / 16) * (15 / 16) / 50_000)

    def test_recall_small(self, rng):
        P, Q = rng.uniform(size=(3000, 8)), rng.uniform(size=(300, 8))
        h, e = HnswIndex(8, rng=rng), ExactIndex(8)
        h.insert_batch(P)
        e.insert_batch(P)
        assert np.mean(h.nn_distance_batch(Q)[1] == e.nn_distance_batch(Q)[1]) >= 0.95
        assert h.last_visited.shape == (300,) and np.all(h.last_visited > 0)

    def test_growth_keeps_state(self, rng):
        h = HnswIndex(2, capacity=4, rng=rng)
        P = rng.normal(size=(100, 2))
        h.insert_batch(P)
        assert np.all(h.nn_distance_batch(P)[0] == 0.0)

    def test_m_link_validated(self):
        with pytest.raises(ValueError):
            HnswIndex(2, m_link=1)


def test_make_index():
    assert isinstance(make_index(3, exact=True), ExactIndex)
    h = make_index(3, m_link=8)
    assert isinstance(h, HnswIndex) and h.m_link == 8
