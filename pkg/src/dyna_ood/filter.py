"""Nearest-neighbour OOD filter for model-simulated transitions.

A simulated transition is kept iff the distance from its key to the
closest real key is strictly below the reject level ``eps_k``. Keys are
either the state alone or the state with a weighted one-hot action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import RolloutBatch, state_action_keys
from .errors import EmptyIndexError, ScheduleError

KEY_MODES = ("state", "state_action")
SCHEDULES = ("static", "dynamic", "off")


@dataclass(frozen=True)
class RejectSchedule:
    """Rule for the per-episode reject level.

    ``static`` uses a fixed ``epsilon``. ``dynamic`` eliminates the
    farthest fraction ``f(k) = (L-1)/L * (K-k)/(K-1)`` of each batch, so
    episode 1 keeps roughly the first rollout step only and episode K keeps
    everything. ``off`` disables filtering.
    """

    kind: str = "static"
    epsilon: float = math.inf
    total_episodes: int = 2
    rollout_length: int = 1
    key_mode: str = "state"
    action_weight: float = 1.0

    def __post_init__(self):
        if self.kind not in SCHEDULES:
            raise ScheduleError(f"unknown schedule {self.kind!r}")
        if self.key_mode not in KEY_MODES:
            raise ScheduleError(f"unknown key mode {self.key_mode!r}")
        if self.kind == "static" and not self.epsilon >= 0:
            raise ScheduleError("static epsilon must be >= 0")
        if self.kind == "dynamic" and (self.total_episodes < 2 or self.rollout_length < 1):
            raise ScheduleError("dynamic schedule needs K >= 2 and L >= 1")
        if self.action_weight <= 0:
            raise ScheduleError("action weight must be positive")

    def elimination_count(self, k: int, n: int) -> int:
        """``ceil(f(k) * n)`` evaluated in exact integer arithmetic."""
        K, L = self.total_episodes, self.rollout_length
        if not 1 <= k <= K:
            raise ScheduleError(f"episode {k} outside [1, {K}]")
        num = (L - 1) * (K - k) * n
        den = L * (K - 1)
        return -(-num // den)

    def elimination_fraction(self, k: int) -> float:
        if self.kind != "dynamic":
            return 0.0
        K, L = self.total_episodes, self.rollout_length
        if not 1 <= k <= K:
            raise ScheduleError(f"episode {k} outside [1, {K}]")
        return (L - 1) / L * (K - k) / (K - 1)


@dataclass
class FilterReport:
    kept: int
    rejected: int
    kept_per_step: np.ndarray
    dist_min: float
    dist_median: float
    dist_max: float
    eps: float
    distances: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def as_dict(self) -> dict:
        return {
            "kept": self.kept,
            "rejected": self.rejected,
            "kept_per_step": [int(x) for x in self.kept_per_step],
            "dist_min": self.dist_min,
            "dist_median": self.dist_median,
            "dist_max": self.dist_max,
            "eps": self.eps,
        }


def candidate_keys(batch: RolloutBatch, key_mode: str = "state", n_actions: int | None = None, action_weight: float = 1.0) -> np.ndarray:
    if key_mode == "state":
        return batch.s
    if n_actions is None:
        raise ValueError("state_action keys need n_actions")
    return state_action_keys(batch.s, batch.a, n_actions, action_weight)


def nn_distances(index, keys: np.ndarray) -> np.ndarray:
    if len(index) == 0:
        raise EmptyIndexError("real-data index is empty")
    if len(keys) == 0:
        return np.zeros(0)
    return index.nn_distance_batch(keys)[0]


def dynamic_keep_mask(distances: np.ndarray, n_elim: int) -> np.ndarray:
    """Drop the ``n_elim`` farthest candidates; among equal distances the earlier index survives."""
    n = len(distances)
    keep = np.ones(n, dtype=bool)
    if n_elim <= 0:
        return keep
    # lexsort: last key is primary -> distance descending, then index descending
    order = np.lexsort((-np.arange(n), -distances))
    keep[order[:n_elim]] = False
    return keep


def schedule_eps(sch: RejectSchedule, k: int, distances: np.ndarray) -> float:
    """Reject level for episode ``k`` given the batch's NN distances.

    For the dynamic rule this is the smallest eliminated distance, so every
    eliminated candidate lies at or beyond it (``inf`` if nothing is
    eliminated).
    """
    if sch.kind == "off":
        return math.inf
    if sch.kind == "static":
        return float(sch.epsilon)
    n_elim = sch.elimination_count(k, len(distances))
    if n_elim == 0:
        return math.inf
    keep = dynamic_keep_mask(distances, n_elim)
    return float(np.min(distances[~keep]))


def _report(batch: RolloutBatch, keep: np.ndarray, d: np.ndarray, eps: float, rollout_length: int | None) -> FilterReport:
    L = rollout_length or (int(batch.step.max()) if len(batch) else 0)
    per_step = np.bincount(batch.step[keep] - 1, minlength=L)[:L] if L else np.zeros(0, dtype=np.int64)
    if len(d):
        lo, med, hi = float(d.min()), float(np.median(d)), float(d.max())
    else:
        lo = med = hi = math.nan
    n_keep = int(keep.sum())
    return FilterReport(n_keep, len(batch) - n_keep, per_step, lo, med, hi, eps, d)


def _as_batch(batch) -> tuple[RolloutBatch, bool]:
    if isinstance(batch, RolloutBatch):
        return batch, False
    return RolloutBatch.from_pairs(batch), True


def filter_ood(
    index,
    batch,
    eps_k: float,
    key_mode: str = "state",
    n_actions: int | None = None,
    action_weight: float = 1.0,
    rollout_length: int | None = None,
):
    """Keep the candidates whose key is strictly closer than ``eps_k`` to some real key.

    ``batch`` is a :class:`RolloutBatch` or a list of ``(Transition,
    rollout_step)`` pairs; the kept subset comes back in the same form and
    input order, together with a :class:`FilterReport`.
    """
    if not eps_k >= 0:
        raise ValueError("eps_k must be >= 0")
    rb, was_list = _as_batch(batch)
    d = nn_distances(index, candidate_keys(rb, key_mode, n_actions, action_weight))
    keep = d < eps_k
    report = _report(rb, keep, d, float(eps_k), rollout_length)
    if was_list:
        return [p for p, k in zip(batch, keep) if k], report
    return rb.subset(keep), report


def apply_schedule(index, batch: RolloutBatch, sch: RejectSchedule, k: int, n_actions: int | None = None):
    """Filter one batch under ``sch`` at episode ``k``. Returns ``(kept, report)``."""
    if sch.kind == "off":
        keep = np.ones(len(batch), dtype=bool)
        return batch, _report(batch, keep, np.zeros(0), math.inf, sch.rollout_length)
    if sch.kind == "static":
        return filter_ood(index, batch, sch.epsilon, sch.key_mode, n_actions, sch.action_weight, sch.rollout_length)
    d = nn_distances(index, candidate_keys(batch, sch.key_mode, n_actions, sch.action_weight))
    n_elim = sch.elimination_count(k, len(d))
    keep = dynamic_keep_mask(d, n_elim)
    eps = float(np.min(d[~keep])) if n_elim else math.inf
    return batch.subset(keep), _report(batch, keep, d, eps, sch.rollout_length)


def filter_first_step_guarantee_check(index, batch) -> bool:
    """True iff every first-step candidate's state sits exactly on a stored real state.

    Such candidates have NN distance 0 and therefore survive any ``eps > 0``.
    Only meaningful for an index over states.
    """
    rb, _ = _as_batch(batch)
    first = rb.step == 1
    if not np.any(first):
        return True
    d = nn_distances(index, rb.s[first])
    return bool(np.all(d == 0.0))
