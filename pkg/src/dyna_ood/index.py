"""Nearest-neighbour indexes over real vectors: HNSW and an exact linear scan.

Both indexes support streaming insertion and return ``(distance, id)`` of
the nearest stored point. Distances are always recomputed by the same
routine (``sq_dists``) so that an approximate answer can never report a
smaller distance than the exact scan would for the same point.
"""

from __future__ import annotations

import math

import numba
import numpy as np

from .errors import DimensionError, EmptyIndexError

MAX_LEVEL = 16


def sq_dists(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances from ``q`` to each row of ``P``.

    Dimensions are accumulated left to right, which matches a naive scalar
    loop bit for bit.
    """
    out = np.zeros(P.shape[0])
    for j in range(P.shape[1]):
        diff = P[:, j] - q[j]
        out += diff * diff
    return out


def _check_query(q, dim: int) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if q.shape[0] != dim:
        raise DimensionError(f"expected dimension {dim}, got {q.shape[0]}")
    return q


class ExactIndex:
    """Flat array of points queried by linear scan (ties go to the lowest id)."""

    def __init__(self, dim: int, chunk: int = 256):
        self.dim = dim
        self.chunk = chunk
        self._data = np.empty((16, dim))
        self._n = 0

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._data[: self._n]

    def insert(self, point) -> int:
        point = _check_query(point, self.dim)
        if self._n == len(self._data):
            self._data = np.concatenate([self._data, np.empty_like(self._data)])
        self._data[self._n] = point
        self._n += 1
        return self._n - 1

    def insert_batch(self, points) -> None:
        for p in np.atleast_2d(points):
            self.insert(p)

    def nn_distance(self, q) -> tuple[float, int]:
        if self._n == 0:
            raise EmptyIndexError("index is empty")
        q = _check_query(q, self.dim)
        d2 = sq_dists(self.points, q)
        i = int(np.argmin(d2))
        return math.sqrt(d2[i]), i

    def nn_distance_batch(self, Q) -> tuple[np.ndarray, np.ndarray]:
        if self._n == 0:
            raise EmptyIndexError("index is empty")
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if Q.shape[1] != self.dim:
            raise DimensionError(f"expected dimension {self.dim}, got {Q.shape[1]}")
        P = self.points
        ids = np.empty(len(Q), dtype=np.int64)
        best = np.empty(len(Q))
        for start in range(0, len(Q), self.chunk):
            block = Q[start : start + self.chunk]
            d2 = np.zeros((len(block), len(P)))
            for j in range(self.dim):
                diff = P[None, :, j] - block[:, j, None]
                d2 += diff * diff
            i = np.argmin(d2, axis=1)
            ids[start : start + len(block)] = i
            best[start : start + len(block)] = d2[np.arange(len(block)), i]
        return np.sqrt(best), ids


# ---------------------------------------------------------------------------
# compiled HNSW kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True)
def _dist2(data, a, q):
    s = 0.0
    for j in range(q.shape[0]):
        t = data[a, j] - q[j]
        s += t * t
    return s


@numba.njit(cache=True)
def _dist2_nodes(data, a, b):
    s = 0.0
    for j in range(data.shape[1]):
        t = data[a, j] - data[b, j]
        s += t * t
    return s


@numba.njit(cache=True)
def _nbrs(node, layer, nbr0, cnt0, slot, nbrU, cntU):
    if layer == 0:
        return nbr0[node], cnt0[node]
    s = slot[node]
    return nbrU[s, layer], cntU[s, layer]


@numba.njit(cache=True)
def _heap_push_min(hd, hi, size, d, i):
    k = size
    hd[k] = d
    hi[k] = i
    while k > 0:
        p = (k - 1) >> 1
        if hd[p] <= hd[k]:
            break
        hd[p], hd[k] = hd[k], hd[p]
        hi[p], hi[k] = hi[k], hi[p]
        k = p
    return size + 1


@numba.njit(cache=True)
def _heap_pop_min(hd, hi, size):
    size -= 1
    hd[0] = hd[size]
    hi[0] = hi[size]
    k = 0
    while True:
        l = 2 * k + 1
        if l >= size:
            break
        c = l
        if l + 1 < size and hd[l + 1] < hd[l]:
            c = l + 1
        if hd[k] <= hd[c]:
            break
        hd[c], hd[k] = hd[k], hd[c]
        hi[c], hi[k] = hi[k], hi[c]
        k = c
    return size


@numba.njit(cache=True)
def _search_layer(q, eps, n_eps, ef, layer, data, nbr0, cnt0, slot, nbrU, cntU, visited, tag, cd, ci, rd, ri):
    """Beam search on one layer. Results end up in rd/ri as a max-heap encoded by negated keys."""
    n_cand = 0
    n_res = 0
    n_eval = 0
    for k in range(n_eps):
        e = eps[k]
        visited[e] = tag
        d = _dist2(data, e, q)
        n_eval += 1
        n_cand = _heap_push_min(cd, ci, n_cand, d, e)
        n_res = _heap_push_min(rd, ri, n_res, -d, e)
        if n_res > ef:
            n_res = _heap_pop_min(rd, ri, n_res)
    while n_cand > 0:
        dc = cd[0]
        c = ci[0]
        if -rd[0] < dc and n_res >= ef:
            break
        n_cand = _heap_pop_min(cd, ci, n_cand)
        nb, cnt = _nbrs(c, layer, nbr0, cnt0, slot, nbrU, cntU)
        for k in range(cnt):
            e = nb[k]
            if visited[e] == tag:
                continue
            visited[e] = tag
            d = _dist2(data, e, q)
            n_eval += 1
            if n_res < ef or d < -rd[0]:
                n_cand = _heap_push_min(cd, ci, n_cand, d, e)
                n_res = _heap_push_min(rd, ri, n_res, -d, e)
                if n_res > ef:
                    n_res = _heap_pop_min(rd, ri, n_res)
    return n_res, n_eval


@numba.njit(cache=True)
def _sorted_results(rd, ri, n_res):
    d = np.empty(n_res)
    ids = np.empty(n_res, dtype=np.int64)
    for k in range(n_res):
        d[k] = -rd[k]
        ids[k] = ri[k]
    order = np.argsort(d, kind="mergesort")
    return d[order], ids[order]


@numba.njit(cache=True)
def _select_heuristic(data, cand_ids, cand_d, n, m, out):
    """Keep a candidate only if it is closer to the base than to every kept neighbour."""
    k = 0
    for a in range(n):
        if k >= m:
            break
        c = cand_ids[a]
        good = True
        for b in range(k):
            if _dist2_nodes(data, c, out[b]) < cand_d[a]:
                good = False
                break
        if good:
            out[k] = c
            k += 1
    return k


@numba.njit(cache=True)
def _greedy(q, cur, top, bottom, data, nbr0, cnt0, slot, nbrU, cntU):
    dcur = _dist2(data, cur, q)
    n_eval = 1
    for layer in range(top, bottom, -1):
        changed = True
        while changed:
            changed = False
            nb, cnt = _nbrs(cur, layer, nbr0, cnt0, slot, nbrU, cntU)
            for k in range(cnt):
                e = nb[k]
                d = _dist2(data, e, q)
                n_eval += 1
                if d < dcur:
                    dcur = d
                    cur = e
                    changed = True
    return cur, n_eval


@numba.njit(cache=True)
def _connect(node, e, layer, m_max, data, nbr0, cnt0, slot, nbrU, cntU, tmp_ids, tmp_d, out):
    nb, cnt = _nbrs(e, layer, nbr0, cnt0, slot, nbrU, cntU)
    if cnt < m_max:
        nb[cnt] = node
        if layer == 0:
            cnt0[e] = cnt + 1
        else:
            cntU[slot[e], layer] = cnt + 1
        return
    for k in range(cnt):
        tmp_ids[k] = nb[k]
        tmp_d[k] = _dist2_nodes(data, e, nb[k])
    tmp_ids[cnt] = node
    tmp_d[cnt] = _dist2_nodes(data, e, node)
    order = np.argsort(tmp_d[: cnt + 1], kind="mergesort")
    sid = tmp_ids[: cnt + 1][order]
    sd = tmp_d[: cnt + 1][order]
    k = _select_heuristic(data, sid, sd, cnt + 1, m_max, out)
    for j in range(k):
        nb[j] = out[j]
    if layer == 0:
        cnt0[e] = k
    else:
        cntU[slot[e], layer] = k


@numba.njit(cache=True)
def _insert(node, level, entry, max_level, m, ef_c, data, nbr0, cnt0, slot, nbrU, cntU, visited, tag, cd, ci, rd, ri):
    q = data[node]
    cur, _ = _greedy(q, entry, max_level, level, data, nbr0, cnt0, slot, nbrU, cntU)
    eps = np.empty(ef_c, dtype=np.int64)
    eps[0] = cur
    n_eps = 1
    tmp_ids = np.empty(2 * m + 1, dtype=np.int64)
    tmp_d = np.empty(2 * m + 1)
    out = np.empty(2 * m + 1, dtype=np.int64)
    for layer in range(min(level, max_level), -1, -1):
        tag += 1
        n_res, _ = _search_layer(q, eps, n_eps, ef_c, layer, data, nbr0, cnt0, slot, nbrU, cntU, visited, tag, cd, ci, rd, ri)
        sd, sid = _sorted_results(rd, ri, n_res)
        k = _select_heuristic(data, sid, sd, n_res, m, out)
        nb, _ = _nbrs(node, layer, nbr0, cnt0, slot, nbrU, cntU)
        for j in range(k):
            nb[j] = out[j]
        if layer == 0:
            cnt0[node] = k
        else:
            cntU[slot[node], layer] = k
        m_max = 2 * m if layer == 0 else m
        for j in range(k):
            _connect(node, nb[j], layer, m_max, data, nbr0, cnt0, slot, nbrU, cntU, tmp_ids, tmp_d, out)
        for j in range(n_res):
            eps[j] = sid[j]
        n_eps = n_res
    return tag


@numba.njit(cache=True)
def _query_batch(Q, ef, entry, max_level, data, nbr0, cnt0, slot, nbrU, cntU, visited, tag, cd, ci, rd, ri, out_ids, out_eval):
    eps = np.empty(1, dtype=np.int64)
    for t in range(Q.shape[0]):
        q = Q[t]
        cur, n_greedy = _greedy(q, entry, max_level, 0, data, nbr0, cnt0, slot, nbrU, cntU)
        eps[0] = cur
        tag += 1
        n_res, n_eval = _search_layer(q, eps, 1, ef, 0, data, nbr0, cnt0, slot, nbrU, cntU, visited, tag, cd, ci, rd, ri)
        best = 0
        for k in range(1, n_res):
            if -rd[k] < -rd[best] or (-rd[k] == -rd[best] and ri[k] < ri[best]):
                best = k
        out_ids[t] = ri[best]
        out_eval[t] = n_greedy + n_eval
    return tag


class HnswIndex:
    """Hierarchical navigable small-world graph for approximate nearest neighbours.

    Parameters follow the usual HNSW conventions: ``m_link`` links per node
    on upper layers (twice that on layer 0), levels drawn as
    ``floor(-ln(u) * m_l)``, beam widths ``ef_construction`` and
    ``ef_search``. Neighbour lists are pruned with the distance-diversity
    heuristic. Deletion is not supported.
    """

    def __init__(
        self,
        dim: int,
        m_link: int = 16,
        ef_construction: int = 200,
        ef_search: int = 64,
        m_l: float | None = None,
        rng: np.random.Generator | None = None,
        capacity: int = 1024,
    ):
        if m_link < 2:
            raise ValueError("m_link must be >= 2")
        self.dim = dim
        self.m_link = m_link
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.m_l = 1.0 / math.log(m_link) if m_l is None else m_l
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.entry = -1
        self.max_level = -1
        self._n = 0
        self._n_upper = 0
        self._tag = 0
        self.last_visited = np.zeros(0, dtype=np.int64)
        self._alloc(capacity, max(capacity // 8, 16))

    def __len__(self) -> int:
        return self._n

    @property
    def points(self) -> np.ndarray:
        return self._data[: self._n]

    @property
    def levels(self) -> np.ndarray:
        return self._levels[: self._n]

    def _alloc(self, cap: int, cap_upper: int) -> None:
        m = self.m_link
        old = getattr(self, "_data", None)
        data = np.zeros((cap, self.dim))
        levels = np.zeros(cap, dtype=np.int64)
        nbr0 = np.zeros((cap, 2 * m), dtype=np.int64)
        cnt0 = np.zeros(cap, dtype=np.int64)
        slot = np.full(cap, -1, dtype=np.int64)
        visited = np.zeros(cap, dtype=np.int64)
        if old is not None:
            n = self._n
            data[:n] = self._data[:n]
            levels[:n] = self._levels[:n]
            nbr0[:n] = self._nbr0[:n]
            cnt0[:n] = self._cnt0[:n]
            slot[:n] = self._slot[:n]
            visited[:n] = self._visited[:n]
        self._data, self._levels, self._nbr0, self._cnt0 = data, levels, nbr0, cnt0
        self._slot, self._visited = slot, visited
        self._cd = np.empty(cap + 1)
        self._ci = np.empty(cap + 1, dtype=np.int64)
        self._rd = np.empty(cap + 1)
        self._ri = np.empty(cap + 1, dtype=np.int64)
        self._alloc_upper(cap_upper)

    def _alloc_upper(self, cap_upper: int) -> None:
        nbrU = np.zeros((cap_upper, MAX_LEVEL, self.m_link), dtype=np.int64)
        cntU = np.zeros((cap_upper, MAX_LEVEL), dtype=np.int64)
        old = getattr(self, "_nbrU", None)
        if old is not None:
            k = self._n_upper
            nbrU[:k] = self._nbrU[:k]
            cntU[:k] = self._cntU[:k]
        self._nbrU, self._cntU = nbrU, cntU

    def _draw_level(self) -> int:
        u = 1.0 - self.rng.random()
        return min(int(math.floor(-math.log(u) * self.m_l)), MAX_LEVEL - 1)

    def insert(self, point) -> int:
        point = _check_query(point, self.dim)
        if self._n == len(self._data):
            self._alloc(2 * len(self._data), len(self._nbrU))
        node = self._n
        level = self._draw_level()
        self._data[node] = point
        self._levels[node] = level
        if level > 0:
            if self._n_upper == len(self._nbrU):
                self._alloc_upper(2 * len(self._nbrU))
            self._slot[node] = self._n_upper
            self._n_upper += 1
        self._n += 1
        if self.entry < 0:
            self.entry, self.max_level = node, level
            return node
        self._tag = _insert(
            node, level, self.entry, self.max_level, self.m_link, max(self.ef_construction, 1),
            self._data, self._nbr0, self._cnt0, self._slot, self._nbrU, self._cntU,
            self._visited, self._tag, self._cd, self._ci, self._rd, self._ri,
        )
        if level > self.max_level:
            self.entry, self.max_level = node, level
        return node

    def insert_batch(self, points) -> None:
        for p in np.atleast_2d(points):
            self.insert(p)

    def nn_distance_batch(self, Q, ef: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Approximate nearest neighbour of each query row.

        Per-query distance-evaluation counts are left in ``last_visited``.
        """
        if self._n == 0:
            raise EmptyIndexError("index is empty")
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        if Q.shape[1] != self.dim:
            raise DimensionError(f"expected dimension {self.dim}, got {Q.shape[1]}")
        ef = max(self.ef_search if ef is None else ef, 1)
        ids = np.empty(len(Q), dtype=np.int64)
        visited = np.empty(len(Q), dtype=np.int64)
        self._tag = _query_batch(
            Q, ef, self.entry, self.max_level, self._data, self._nbr0, self._cnt0, self._slot,
            self._nbrU, self._cntU, self._visited, self._tag, self._cd, self._ci, self._rd, self._ri,
            ids, visited,
        )
        self.last_visited = visited
        P = self._data[ids]
        d2 = np.zeros(len(Q))
        for j in range(self.dim):
            diff = P[:, j] - Q[:, j]
            d2 += diff * diff
        return np.sqrt(d2), ids

    def nn_distance(self, q, ef: int | None = None) -> tuple[float, int]:
        d, i = self.nn_distance_batch(_check_query(q, self.dim)[None], ef)
        return float(d[0]), int(i[0])

    def neighbors(self, node: int, layer: int = 0) -> np.ndarray:
        if layer == 0:
            return self._nbr0[node, : self._cnt0[node]].copy()
        s = self._slot[node]
        if s < 0 or layer > self._levels[node]:
            return np.zeros(0, dtype=np.int64)
        return self._nbrU[s, layer, : self._cntU[s, layer]].copy()

    def reachable_count(self, layer: int = 0) -> int:
        """Number of nodes reachable from the entry point by following layer links."""
        if self._n == 0:
            return 0
        seen = np.zeros(self._n, dtype=bool)
        stack = [self.entry]
        seen[self.entry] = True
        while stack:
            c = stack.pop()
            for e in self.neighbors(c, layer):
                if not seen[e]:
                    seen[e] = True
                    stack.append(int(e))
        return int(seen.sum())


def make_index(dim: int, exact: bool = False, rng: np.random.Generator | None = None, **hnsw):
    return ExactIndex(dim) if exact else HnswIndex(dim, rng=rng, **hnsw)
