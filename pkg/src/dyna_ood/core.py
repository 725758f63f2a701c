"""Shared domain types: transitions, bounded replay buffers and seeded streams."""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .errors import DimensionError, EmptyBufferError


@dataclass(frozen=True)
class Transition:
    """One experience tuple ``(s, a, s', r, done)``."""

    s: np.ndarray
    a: int
    s_next: np.ndarray
    r: float
    done: bool = False

    def __post_init__(self):
        s = np.array(self.s, dtype=np.float64).reshape(-1)
        s_next = np.array(self.s_next, dtype=np.float64).reshape(-1)
        if s.shape != s_next.shape:
            raise DimensionError(f"state dims differ: {s.shape} vs {s_next.shape}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(s_next))):
            raise ValueError("transition states must be finite")
        if not np.isfinite(self.r):
            raise ValueError("reward must be finite")
        if int(self.a) < 0:
            raise ValueError("action id must be non-negative")
        s.flags.writeable = False
        s_next.flags.writeable = False
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "s_next", s_next)
        object.__setattr__(self, "a", int(self.a))
        object.__setattr__(self, "r", float(self.r))
        object.__setattr__(self, "done", bool(self.done))

    @property
    def dim(self) -> int:
        return self.s.shape[0]


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for one named component of a run.

    The stream for ``name`` is seeded with ``SeedSequence(seed,
    spawn_key=(crc32(name),))``, so each component's draws depend only on
    the run seed and its own name. Adding or removing another consumer
    never shifts this stream.
    """
    key = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(key,)))


class ReplayBuffer:
    """Bounded FIFO ring buffer of transitions with uniform sampling.

    Storage is columnar (states, actions, rewards, next states, done flags)
    and grows geometrically until ``capacity`` is reached; after that the
    oldest item is overwritten. Logical index 0 is always the oldest item.
    """

    def __init__(self, capacity: int = 1_000_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.insert_count = 0
        self._dim: int | None = None
        self._size = 0
        self._start = 0
        self._alloc = 0
        self._s = self._s2 = self._r = self._a = self._d = None

    def __len__(self) -> int:
        return self._size

    @property
    def dim(self) -> int | None:
        return self._dim

    def _allocate(self, n: int) -> None:
        d = self._dim
        s = np.empty((n, d))
        s2 = np.empty((n, d))
        a = np.empty(n, dtype=np.int64)
        r = np.empty(n)
        done = np.empty(n, dtype=bool)
        if self._size:
            order = self._physical(np.arange(self._size))
            s[: self._size] = self._s[order]
            s2[: self._size] = self._s2[order]
            a[: self._size] = self._a[order]
            r[: self._size] = self._r[order]
            done[: self._size] = self._d[order]
        self._s, self._s2, self._a, self._r, self._d = s, s2, a, r, done
        self._alloc = n
        self._start = 0

    def _physical(self, idx: np.ndarray) -> np.ndarray:
        return (self._start + idx) % max(self._alloc, 1)

    def push(self, t: Transition) -> "ReplayBuffer":
        if self._dim is None:
            self._dim = t.dim
            self._allocate(min(self.capacity, 1024))
        elif t.dim != self._dim:
            raise DimensionError(f"expected state dim {self._dim}, got {t.dim}")
        if self._size == self._alloc and self._alloc < self.capacity:
            self._allocate(min(self.capacity, 2 * self._alloc))
        if self._size < self._alloc:
            j = (self._start + self._size) % self._alloc
            self._size += 1
        else:
            # full: overwrite the oldest slot
            j = self._start
            self._start = (self._start + 1) % self._alloc
        self._s[j] = t.s
        self._s2[j] = t.s_next
        self._a[j] = t.a
        self._r[j] = t.r
        self._d[j] = t.done
        self.insert_count += 1
        return self

    def extend(self, items) -> "ReplayBuffer":
        for t in items:
            self.push(t)
        return self

    def __getitem__(self, i: int) -> Transition:
        if not -self._size <= i < self._size:
            raise IndexError(i)
        j = int(self._physical(np.asarray(i % self._size)))
        return Transition(self._s[j], int(self._a[j]), self._s2[j], float(self._r[j]), bool(self._d[j]))

    def __iter__(self) -> Iterator[Transition]:
        for i in range(self._size):
            yield self[i]

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Logical indices drawn uniformly with replacement."""
        if self._size == 0:
            raise EmptyBufferError("cannot sample from an empty buffer")
        if n < 1:
            raise ValueError("n must be >= 1")
        return rng.integers(0, self._size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> list[Transition]:
        return [self[int(i)] for i in self.sample_indices(n, rng)]

    def batch(self, idx: np.ndarray) -> tuple[np.ndarray, ...]:
        """Columnar view ``(s, a, r, s_next, done)`` of the given logical indices."""
        j = self._physical(np.asarray(idx, dtype=np.int64))
        return self._s[j], self._a[j], self._r[j], self._s2[j], self._d[j]

    def sample_batch(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
        return self.batch(self.sample_indices(n, rng))

    def arrays(self) -> tuple[np.ndarray, ...]:
        """All items as columns, oldest first."""
        if self._size == 0:
            raise EmptyBufferError("buffer is empty")
        return tuple(x.copy() for x in self.batch(np.arange(self._size)))

    def states(self) -> np.ndarray:
        if self._size == 0:
            return np.empty((0, self._dim or 0))
        return self.arrays()[0]

    def save(self, path) -> None:
        s, a, r, s2, d = self.arrays()
        np.savez(path, s=s, a=a, r=r, s_next=s2, done=d, capacity=self.capacity)

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as z:
            buf = cls(int(z["capacity"]))
            for s, a, r, s2, d in zip(z["s"], z["a"], z["r"], z["s_next"], z["done"]):
                buf.push(Transition(s, int(a), s2, float(r), bool(d)))
        return buf

    @classmethod
    def from_arrays(cls, s, a, r, s_next, done=None, capacity: int | None = None) -> "ReplayBuffer":
        s = np.asarray(s, dtype=np.float64)
        n = s.shape[0]
        done = np.zeros(n, dtype=bool) if done is None else done
        buf = cls(capacity or max(n, 1))
        for i in range(n):
            buf.push(Transition(s[i], int(a[i]), s_next[i], float(r[i]), bool(done[i])))
        return buf


def one_hot(a, n_actions: int, weight: float = 1.0) -> np.ndarray:
    """One-hot rows (scaled by ``weight``) for an int or an int array."""
    a = np.asarray(a, dtype=np.int64)
    out = np.zeros(a.shape + (n_actions,))
    np.put_along_axis(out, a[..., None], weight, axis=-1)
    return out


def state_action_keys(s: np.ndarray, a, n_actions: int, weight: float = 1.0) -> np.ndarray:
    """Concatenate states with weighted one-hot actions: rows of ``(s, w*e_a)``."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float64))
    return np.concatenate([s, one_hot(np.atleast_1d(a), n_actions, weight)], axis=1)


@dataclass
class RolloutBatch:
    """Columnar batch of simulated transitions tagged with their rollout step (1-based)."""

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    step: np.ndarray

    def __post_init__(self):
        self.s = np.asarray(self.s, dtype=np.float64)
        if self.s.ndim != 2:
            raise DimensionError("rollout states must be a 2-D array")
        self.s_next = np.asarray(self.s_next, dtype=np.float64).reshape(self.s.shape)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.done = np.asarray(self.done, dtype=bool)
        self.step = np.asarray(self.step, dtype=np.int64)
        n = len(self.a)
        if not all(len(x) == n for x in (self.s, self.r, self.s_next, self.done, self.step)):
            raise DimensionError("rollout batch columns differ in length")

    def __len__(self) -> int:
        return len(self.a)

    @classmethod
    def empty(cls, dim: int) -> "RolloutBatch":
        z = np.zeros(0)
        return cls(np.zeros((0, dim)), z.astype(np.int64), z, np.zeros((0, dim)), z.astype(bool), z.astype(np.int64))

    @classmethod
    def from_pairs(cls, pairs, dim: int | None = None) -> "RolloutBatch":
        pairs = list(pairs)
        if not pairs:
            return cls.empty(dim or 0)
        ts = [t for t, _ in pairs]
        return cls(
            np.stack([t.s for t in ts]),
            np.array([t.a for t in ts]),
            np.array([t.r for t in ts]),
            np.stack([t.s_next for t in ts]),
            np.array([t.done for t in ts]),
            np.array([k for _, k in pairs]),
        )

    def to_pairs(self) -> list[tuple[Transition, int]]:
        return [
            (Transition(self.s[i], int(self.a[i]), self.s_next[i], float(self.r[i]), bool(self.done[i])), int(self.step[i]))
            for i in range(len(self))
        ]

    def subset(self, idx) -> "RolloutBatch":
        return RolloutBatch(self.s[idx], self.a[idx], self.r[idx], self.s_next[idx], self.done[idx], self.step[idx])

    @staticmethod
    def concat(batches) -> "RolloutBatch":
        batches = list(batches)
        return RolloutBatch(*(np.concatenate([getattr(b, f) for b in batches]) for f in ("s", "a", "r", "s_next", "done", "step")))
