"""Monte-Carlo and deterministic checks of the drift bounds.

Four checks share one report type:

* ``verify_chebyshev``: distance between two independent Gaussian draws.
* ``verify_theorem1``: next-state shift between a real and a candidate
  state-action pair under a KDE model.
* ``verify_theorem2``: deterministic drift of one Q update when a real
  transition ``d`` is swapped for a simulated ``d_hat``.
* ``verify_prop1``: both composed, with the transition distance itself
  bounded through the next-state shift.

Multi-dimensional variances enter through their trace. Transition distance
``||d - d_hat||`` is the Euclidean norm over the concatenation of the
state-action key (state plus weighted one-hot action) and the next state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .agent import QNetwork
from .core import RolloutBatch, Transition, state_action_keys
from .model import KdeModel, clamp_var
from .nn import mlp_forward, mlp_per_sample_grads

C2_FORMS = ("derived", "stated", "pointwise")
CONSTANT_NAMES = ("L1", "L2", "L3", "L4", "D1", "D2", "D3")
MIN_CHEBYSHEV_TRIALS = 10_000


def mc_slack(p: float, n: int) -> float:
    """Three binomial standard errors at rate ``p`` over ``n`` trials."""
    if n <= 0:
        return 0.0
    return 3.0 * math.sqrt(max(p * (1.0 - p), 0.0) / n)


@dataclass
class BoundReport:
    name: str
    n_trials: int
    lhs: np.ndarray = field(repr=False)
    rhs: np.ndarray = field(repr=False)
    violation_count: int
    allowed_violation_prob: float
    mc_slack: float
    verdict: str
    skipped: int = 0
    flagged: int = 0
    details: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0 <= self.violation_count <= self.n_trials:
            raise ValueError("violation_count must lie in [0, n_trials]")

    @property
    def violation_rate(self) -> float:
        return self.violation_count / self.n_trials if self.n_trials else 0.0

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def summary(self) -> dict:
        """Flat row for text and CSV output."""
        return {
            "name": self.name,
            "n_trials": self.n_trials,
            "violations": self.violation_count,
            "violation_rate": self.violation_rate,
            "allowed": self.allowed_violation_prob,
            "mc_slack": self.mc_slack,
            "skipped": self.skipped,
            "flagged": self.flagged,
            "max_lhs_over_rhs": _max_ratio(self.lhs, self.rhs),
            "verdict": self.verdict,
        }


def _max_ratio(lhs: np.ndarray, rhs: np.ndarray) -> float:
    if len(lhs) == 0:
        return math.nan
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    return float(np.max(r))


def _probabilistic_report(name, lhs, rhs, allowed, skipped=0, details=None) -> BoundReport:
    n = len(lhs)
    v = int(np.sum(lhs > rhs))
    slack = mc_slack(allowed, n)
    verdict = "pass" if (n == 0 or v / n <= allowed + slack) else "fail"
    return BoundReport(name, n, lhs, rhs, v, allowed, slack, verdict, skipped, 0, details or {})


def merge_reports(reports: list[BoundReport], name: str | None = None) -> BoundReport:
    """Concatenate independent reports of one check by summing their counts."""
    if not reports:
        raise ValueError("nothing to merge")
    first = reports[0]
    lhs = np.concatenate([r.lhs for r in reports])
    rhs = np.concatenate([r.rhs for r in reports])
    n = sum(r.n_trials for r in reports)
    v = sum(r.violation_count for r in reports)
    flagged = sum(r.flagged for r in reports)
    allowed = first.allowed_violation_prob
    slack = mc_slack(allowed, n)
    verdicts = {r.verdict for r in reports}
    if allowed > 0:
        verdict = "pass" if (n == 0 or v / n <= allowed + slack) else "fail"
    elif v == 0:
        verdict = "pass"
    else:
        verdict = "fail" if "fail" in verdicts else "constants_insufficient"
    details = {"parts": [r.details for r in reports]}
    return BoundReport(name or first.name, n, lhs, rhs, v, allowed, slack, verdict, sum(r.skipped for r in reports), flagged, details)


def _trace(var) -> np.ndarray:
    var = np.asarray(var, dtype=np.float64)
    return var.sum(axis=-1) if var.ndim else var


# --------------------------------------------------------------------------- Chebyshev


def chebyshev_radius(sigma2, sigma2_hat, mu, mu_hat, epsilon: float) -> float:
    """``sqrt((tr sigma2 + tr sigma2_hat) / epsilon) + ||mu - mu_hat||``."""
    d = np.atleast_1d(np.asarray(mu, dtype=np.float64) - np.asarray(mu_hat, dtype=np.float64))
    return float(math.sqrt((np.sum(sigma2) + np.sum(sigma2_hat)) / epsilon) + np.linalg.norm(d))


def verify_chebyshev(mu, sigma2, mu_hat, sigma2_hat, epsilon: float, n_trials: int, rng: np.random.Generator, chunk: int = 250_000) -> BoundReport:
    """Draw ``s ~ N(mu, sigma2)`` and ``s_hat ~ N(mu_hat, sigma2_hat)`` independently and count ``||s - s_hat||`` above the radius."""
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    mu_hat = np.atleast_1d(np.asarray(mu_hat, dtype=np.float64))
    var = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), mu.shape)
    var_hat = np.broadcast_to(np.asarray(sigma2_hat, dtype=np.float64), mu.shape)
    if not (np.all(var >= 0) and np.all(var_hat >= 0)):
        raise ValueError("variances must be >= 0")
    sd, sd_hat = np.sqrt(var), np.sqrt(var_hat)
    if not 0.0 < epsilon < 1.0:
        raise ValueError("epsilon must lie in (0, 1)")
    if n_trials < MIN_CHEBYSHEV_TRIALS:
        raise ValueError(f"n_trials must be >= {MIN_CHEBYSHEV_TRIALS}")
    k = chebyshev_radius(sd**2, sd_hat**2, mu, mu_hat, epsilon)
    lhs = np.empty(n_trials)
    for i in range(0, n_trials, chunk):
        m = min(chunk, n_trials - i)
        s = mu + sd * rng.standard_normal((m, len(mu)))
        s_hat = mu_hat + sd_hat * rng.standard_normal((m, len(mu)))
        lhs[i : i + m] = np.linalg.norm(s - s_hat, axis=1)
    rhs = np.full(n_trials, k)
    return _probabilistic_report("chebyshev", lhs, rhs, float(epsilon), details={"radius": k})


# --------------------------------------------------------------------------- KDE model error


def theorem1_setup(env, n_support: int, visits: int, n_pairs: int, rng: np.random.Generator, action_weight: float = 1.0, spread: float | None = None):
    """Logged data with repeated visits, its indicator KDE and support-to-support pairs.

    ``n_support`` distinct state-action keys are each visited ``visits``
    times. Both members of every pair are support keys, so the model is
    defined at the candidate. Returns ``(kde, (S, A), (S_hat, A_hat))``.
    """
    if visits < 1 or n_support < 1:
        raise ValueError("need at least one support key and one visit")
    spread = env.state_high if spread is None else spread
    S0 = rng.uniform(-1.0, 1.0, (n_support, env.d_s)) * spread
    A0 = rng.integers(env.n_actions, size=n_support)
    S_rep, A_rep = np.repeat(S0, visits, axis=0), np.repeat(A0, visits)
    S2 = env.step_batch(S_rep, A_rep, rng)
    kde = KdeModel(env.n_actions, kernel="indicator", action_weight=action_weight).set_support(S_rep, A_rep, S2)
    i, j = rng.integers(n_support, size=n_pairs), rng.integers(n_support, size=n_pairs)
    return kde, (S0[i], A0[i]), (S0[j], A0[j])


def _theorem1_terms(env, kde: KdeModel, S, A, S_hat, A_hat, epsilon, epsilon_kde, L_sa, rng):
    if not (0.0 < epsilon < 1.0 and 0.0 < epsilon_kde < 1.0):
        raise ValueError("epsilon and epsilon_kde must lie in (0, 1)")
    S, S_hat = np.atleast_2d(S), np.atleast_2d(S_hat)
    A, A_hat = np.atleast_1d(A), np.atleast_1d(A_hat)
    if np.any(np.asarray(env.variance(S, A)) <= 0):
        raise ValueError("environment noise must be nonzero")
    L_sa = env.mean_lipschitz(kde.action_weight) if L_sa is None else float(L_sa)
    _, var_r, n_eff = kde.raw_moments_batch(S, A)
    mean_c, var_c, n_eff_c = kde.raw_moments_batch(S_hat, A_hat)
    ok = (n_eff > 0) & (n_eff_c > 0)
    S, A, S_hat, A_hat = S[ok], A[ok], S_hat[ok], A_hat[ok]
    var_hat_real = clamp_var(var_r[ok], kde.var_floor, kde.var_ceiling)
    var_hat_cand = clamp_var(var_c[ok], kde.var_floor, kde.var_ceiling)
    var_true_real = np.broadcast_to(env.variance(S, A), S.shape)
    var_true_cand = np.broadcast_to(env.variance(S_hat, A_hat), S.shape)

    k = kde.action_weight
    delta = np.linalg.norm(state_action_keys(S, A, env.n_actions, k) - state_action_keys(S_hat, A_hat, env.n_actions, k), axis=1)
    t_lip = L_sa * delta
    t_kde = np.sqrt(_trace(var_true_real) / (n_eff[ok] * epsilon_kde))
    t_noise = np.sqrt((_trace(var_true_cand) + _trace(var_hat_real)) / epsilon)

    s2_hat = mean_c[ok] + np.sqrt(var_hat_cand) * rng.standard_normal(S.shape)
    s2 = env.step_batch(S, A, rng)
    return {
        "mask": ok,
        "S": S, "A": A, "S_hat": S_hat, "A_hat": A_hat,
        "s_next": s2, "s_next_hat": s2_hat,
        "delta": delta, "L_sa": L_sa, "n_eff": n_eff[ok],
        "term_lipschitz": t_lip, "term_kde": t_kde, "term_noise": t_noise,
        "var_true_real": var_true_real, "var_true_cand": var_true_cand, "var_hat_real": var_hat_real,
    }


def verify_theorem1(env, kde: KdeModel, S, A, S_hat, A_hat, epsilon: float, epsilon_kde: float, rng: np.random.Generator, L_sa: float | None = None) -> BoundReport:
    """Check ``||s'_hat - s'|| <= L_sa Delta + sqrt(tr sigma^2(s,a) / (n_eff eps_kde)) + sqrt((tr sigma^2(s_hat,a_hat) + tr sigma_hat^2(s,a)) / eps)``.

    ``s'_hat`` is drawn from the KDE prediction at the candidate and ``s'``
    from the environment at the real pair. ``L_sa`` defaults to the
    environment's analytic mean Lipschitz constant. Pairs without kernel
    mass at either end are skipped.
    """
    t = _theorem1_terms(env, kde, S, A, S_hat, A_hat, epsilon, epsilon_kde, L_sa, rng)
    lhs = np.linalg.norm(t["s_next_hat"] - t["s_next"], axis=1)
    rhs = t["term_lipschitz"] + t["term_kde"] + t["term_noise"]
    allowed = 1.0 - (1.0 - epsilon) * (1.0 - epsilon_kde)
    keys = ("delta", "n_eff", "term_lipschitz", "term_kde", "term_noise", "L_sa")
    return _probabilistic_report("theorem1", lhs, rhs, allowed, int((~t["mask"]).sum()), {k: t[k] for k in keys})


# --------------------------------------------------------------------------- update drift


@dataclass
class LipschitzBundle:
    """Lipschitz (``L*``) and sup-norm (``D*``) constants of one Q-learning setup.

    ``L_sa``: model mean in the state-action key. ``L1``: reward. ``L2``:
    parameter gradient of Q. ``L3``: Q itself. ``L4``: ``max_a Q(.; theta^-)``
    in the next state. ``D1``: ``|r|``. ``D2``: ``||grad Q||``. ``D3``:
    ``|Q|`` under both the online and the target parameters.
    """

    L_sa: float = 0.0
    L1: float = 0.0
    L2: float = 0.0
    L3: float = 0.0
    L4: float = 0.0
    D1: float = 0.0
    D2: float = 0.0
    D3: float = 0.0
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("L_sa",) + CONSTANT_NAMES:
            v = getattr(self, name)
            if not v >= 0:
                raise ValueError(f"{name} must be nonnegative, got {v}")


def c1(lb: LipschitzBundle, alpha: float, gamma: float) -> float:
    return alpha * (lb.L1 * lb.L2 + lb.L3 * lb.L2 + gamma * lb.L4 * lb.L2)


def c2_stated(lb: LipschitzBundle, alpha: float, gamma: float) -> float:
    """Linear coefficient with L2 paired to D2 and the reward term to D1 (``c2_form="stated"``)."""
    return alpha * (lb.L2 * lb.D2 + (gamma * lb.L1 + lb.L3 + gamma * lb.L4) * lb.D1 + (1.0 + gamma) * lb.L2 * lb.D3)


def c2_derived(lb: LipschitzBundle, alpha: float, gamma: float) -> float:
    """Linear coefficient obtained by redoing the triangle-inequality split.

    ``(y_hat - Q_hat) g_hat - (y - Q) g = [dy - dQ] (g_hat - g) + [dy - dQ] g + (y - Q)(g_hat - g)``
    with ``|y - Q| <= D1 + (1 + gamma) D3`` and ``||g|| <= D2``.
    """
    return alpha * (lb.L2 * lb.D1 + (lb.L1 + lb.L3 + gamma * lb.L4) * lb.D2 + (1.0 + gamma) * lb.L2 * lb.D3)


def c2_pointwise(lb: LipschitzBundle, alpha: float, gamma: float, r, q_max_next, q, grad_norm) -> np.ndarray:
    """Per-pair version of :func:`c2_derived` with the sup constants replaced by values at ``d``."""
    return alpha * (lb.L2 * (np.abs(r) + gamma * np.abs(q_max_next) + np.abs(q)) + np.asarray(grad_norm) * (lb.L1 + lb.L3 + gamma * lb.L4))


def pairs_from_transitions(pairs: list[tuple[Transition, Transition]]) -> tuple[RolloutBatch, RolloutBatch]:
    """Split ``(d, d_hat)`` tuples into two aligned batches."""
    real = RolloutBatch.from_pairs([(d, 1) for d, _ in pairs])
    cand = RolloutBatch.from_pairs([(d_hat, 1) for _, d_hat in pairs])
    return real, cand


def transition_distance(real: RolloutBatch, cand: RolloutBatch, n_actions: int, action_weight: float = 1.0) -> np.ndarray:
    k = state_action_keys(real.s, real.a, n_actions, action_weight)
    k_hat = state_action_keys(cand.s, cand.a, n_actions, action_weight)
    return np.sqrt(((k - k_hat) ** 2).sum(axis=1) + ((real.s_next - cand.s_next) ** 2).sum(axis=1))


def _side(q: QNetwork, b: RolloutBatch, gamma: float) -> dict:
    """Every quantity of one update evaluated on one side of the pairs."""
    n = len(b)
    rows = np.arange(n)
    Q = q.q_values(b.s)[rows, b.a]
    M = np.max(q.target_values(b.s_next), axis=1)
    y = b.r + gamma * M * (1.0 - b.done.astype(np.float64))
    U = np.zeros((n, q.n_actions))
    U[rows, b.a] = 1.0
    g = mlp_per_sample_grads(q.theta, b.s, U)
    return {"r": b.r, "Q": Q, "M": M, "y": y, "g": g, "td": y - Q, "done": b.done}


def update_drift(q: QNetwork, real: RolloutBatch, cand: RolloutBatch, alpha: float | None = None, gamma: float | None = None) -> np.ndarray:
    """``||theta_hat_{t+1} - theta_{t+1}||`` per pair, both single-sample updates from ``q.theta``."""
    alpha = q.alpha if alpha is None else alpha
    gamma = q.gamma if gamma is None else gamma
    a, b = _side(q, real, gamma), _side(q, cand, gamma)
    theta = q.theta.flat()
    step = theta + alpha * a["td"][:, None] * a["g"]
    step_hat = theta + alpha * b["td"][:, None] * b["g"]
    return np.linalg.norm(step_hat - step, axis=1)


def constant_flags(lb: LipschitzBundle, real_side: dict, cand_side: dict, dsa: np.ndarray, dnext: np.ndarray) -> list[list[str]]:
    """Names of the constants contradicted on each pair (empty list: all hold)."""
    checks = {
        "L1": np.abs(real_side["r"] - cand_side["r"]) > lb.L1 * dsa,
        "L2": np.linalg.norm(real_side["g"] - cand_side["g"], axis=1) > lb.L2 * dsa,
        "L3": np.abs(real_side["Q"] - cand_side["Q"]) > lb.L3 * dsa,
        "L4": np.abs(real_side["M"] - cand_side["M"]) > lb.L4 * dnext,
        "D1": np.maximum(np.abs(real_side["r"]), np.abs(cand_side["r"])) > lb.D1,
        "D2": np.maximum(np.linalg.norm(real_side["g"], axis=1), np.linalg.norm(cand_side["g"], axis=1)) > lb.D2,
        "D3": np.max(np.abs([real_side["Q"], cand_side["Q"], real_side["M"], cand_side["M"]]), axis=0) > lb.D3,
    }
    n = len(dsa)
    return [[k for k, bad in checks.items() if bad[i]] for i in range(n)]


def theorem2_rhs(lb, alpha, gamma, dist, c2_form="derived", c1_scale=1.0, real_side=None) -> np.ndarray:
    if c2_form not in C2_FORMS:
        raise ValueError(f"unknown C2 form {c2_form!r}")
    k1 = c1_scale * c1(lb, alpha, gamma)
    if c2_form == "stated":
        k2 = c2_stated(lb, alpha, gamma)
    elif c2_form == "derived":
        k2 = c2_derived(lb, alpha, gamma)
    else:
        live = 1.0 - real_side["done"].astype(np.float64)
        k2 = c2_pointwise(lb, alpha, gamma, real_side["r"], live * real_side["M"], real_side["Q"], np.linalg.norm(real_side["g"], axis=1))
    return k1 * dist**2 + k2 * dist


def verify_theorem2(
    q: QNetwork,
    lb: LipschitzBundle,
    real: RolloutBatch,
    cand: RolloutBatch,
    alpha: float | None = None,
    gamma: float | None = None,
    c2_form: str = "derived",
    c1_scale: float = 1.0,
    action_weight: float = 1.0,
) -> BoundReport:
    """Deterministic check of ``||theta_hat_{t+1} - theta_{t+1}|| <= C1 ||d - d_hat||^2 + C2 ||d - d_hat||``.

    Any violation triggers a per-pair recheck of every constant in ``lb``.
    Verdict ``pass`` needs zero violations; ``constants_insufficient`` means
    every violating pair also contradicts some constant; ``fail`` means at
    least one violation happened with all constants holding.
    ``c1_scale`` deliberately corrupts C1 (1.0 leaves it intact).
    """
    alpha = q.alpha if alpha is None else alpha
    gamma = q.gamma if gamma is None else gamma
    if len(real) != len(cand):
        raise ValueError("real and candidate batches must be aligned")
    rs, cs = _side(q, real, gamma), _side(q, cand, gamma)
    theta = q.theta.flat()
    lhs = np.linalg.norm((theta + alpha * cs["td"][:, None] * cs["g"]) - (theta + alpha * rs["td"][:, None] * rs["g"]), axis=1)
    dist = transition_distance(real, cand, q.n_actions, action_weight)
    rhs = theorem2_rhs(lb, alpha, gamma, dist, c2_form, c1_scale, rs)

    bad = lhs > rhs
    v = int(bad.sum())
    flagged = 0
    flag_list: list[tuple[int, list[str]]] = []
    if v:
        k = state_action_keys(real.s, real.a, q.n_actions, action_weight) - state_action_keys(cand.s, cand.a, q.n_actions, action_weight)
        dsa = np.linalg.norm(k, axis=1)
        dnext = np.linalg.norm(real.s_next - cand.s_next, axis=1)
        flags = constant_flags(lb, rs, cs, dsa, dnext)
        flag_list = [(int(i), flags[i]) for i in np.flatnonzero(bad)]
        flagged = sum(1 for _, f in flag_list if f)
    if v == 0:
        verdict = "pass"
    elif flagged == v:
        verdict = "constants_insufficient"
    else:
        verdict = "fail"
    details = {
        "C1": c1_scale * c1(lb, alpha, gamma),
        "C2_derived": c2_derived(lb, alpha, gamma),
        "C2_stated": c2_stated(lb, alpha, gamma),
        "c2_form": c2_form,
        "dist": dist,
        "flags": flag_list,
        "stated_violations": int(np.sum(lhs > c1_scale * c1(lb, alpha, gamma) * dist**2 + c2_stated(lb, alpha, gamma) * dist)),
    }
    return BoundReport("theorem2", len(lhs), lhs, rhs, v, 0.0, 0.0, verdict, 0, flagged, details)


# --------------------------------------------------------------------------- constants


def linear_q_bundle(q: QNetwork, reward_w, reward_c: float, states, L_sa: float = 0.0) -> LipschitzBundle:
    """Closed-form constants for a single-action linear Q ``W s + b`` and reward ``w . clip(s) + c``.

    ``R`` is the largest state norm among ``states`` (every state fed to Q or
    to the reward). Then ``grad Q = (s, 1)`` gives ``L2 = 1`` and
    ``D2 = sqrt(R^2 + 1)``; ``L3 = ||W||``, ``L4 = ||W^-||``,
    ``D3 = R max(||W||, ||W^-||) + max(|b|, |b^-|)``; box clipping never
    increases a norm, so ``L1 = ||w||`` and ``D1 = ||w|| R + |c|``.
    """
    p, pm = q.theta, q.theta_minus
    if len(p.weights) != 1 or p.activations[0] != "linear" or p.n_out != 1:
        raise ValueError("closed-form constants need a single-action linear Q")
    R = float(np.max(np.linalg.norm(np.atleast_2d(states), axis=1)))
    w_norm = float(np.linalg.norm(reward_w))
    W, Wm = float(np.linalg.norm(p.weights[0])), float(np.linalg.norm(pm.weights[0]))
    b, bm = float(abs(p.biases[0][0])), float(abs(pm.biases[0][0]))
    tag = "analytic"
    return LipschitzBundle(
        L_sa=L_sa,
        L1=w_norm,
        L2=1.0,
        L3=W,
        L4=Wm,
        D1=w_norm * R + abs(reward_c),
        D2=math.sqrt(R * R + 1.0),
        D3=R * max(W, Wm) + max(b, bm),
        provenance={k: tag for k in ("L_sa",) + CONSTANT_NAMES},
    )


def estimate_bundle(
    q: QNetwork,
    reward_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    state_sampler: Callable[[np.random.Generator, int], np.ndarray],
    rng: np.random.Generator,
    n_samples: int = 2000,
    safety: float = 1.2,
    perturb: float = 0.1,
    action_weight: float = 1.0,
    pairs: tuple[RolloutBatch, RolloutBatch] | None = None,
    L_sa: float = 0.0,
) -> LipschitzBundle:
    """Sampled ratio and norm maxima times ``safety``.

    Ratios come from local pairs ``(s, s + perturb * z)`` with the action kept
    or resampled, plus the harness's own ``pairs`` when given, so that the
    constants cover the pairs they will be checked on.
    """
    if safety < 1.0:
        raise ValueError("safety must be >= 1")
    n_a = q.n_actions
    S = state_sampler(rng, n_samples)
    S_hat = S + perturb * rng.standard_normal(S.shape)
    A = rng.integers(n_a, size=n_samples)
    A_hat = np.where(rng.random(n_samples) < 0.5, A, rng.integers(n_a, size=n_samples))
    S2 = state_sampler(rng, n_samples)
    S2_hat = S2 + perturb * rng.standard_normal(S2.shape)
    if pairs is not None:
        real, cand = pairs
        S, S_hat = np.vstack([S, real.s]), np.vstack([S_hat, cand.s])
        A, A_hat = np.concatenate([A, real.a]), np.concatenate([A_hat, cand.a])
        S2, S2_hat = np.vstack([S2, real.s_next]), np.vstack([S2_hat, cand.s_next])

    def grads(X, a):
        U = np.zeros((len(X), n_a))
        U[np.arange(len(X)), a] = 1.0
        return mlp_per_sample_grads(q.theta, X, U)

    dsa = np.linalg.norm(state_action_keys(S, A, n_a, action_weight) - state_action_keys(S_hat, A_hat, n_a, action_weight), axis=1)
    dn = np.linalg.norm(S2 - S2_hat, axis=1)
    ok, okn = dsa > 1e-12, dn > 1e-12
    r, r_hat = reward_fn(S, A), reward_fn(S_hat, A_hat)
    g, g_hat = grads(S, A), grads(S_hat, A_hat)
    rows = np.arange(len(S))
    Q, Q_hat = q.q_values(S)[rows, A], q.q_values(S_hat)[rows, A_hat]
    M, M_hat = np.max(q.target_values(S2), axis=1), np.max(q.target_values(S2_hat), axis=1)

    def ratio(num, den, mask):
        return float(np.max(num[mask] / den[mask])) if np.any(mask) else 0.0

    all_states = np.vstack([S, S_hat, S2, S2_hat])
    sup_q = max(
        float(np.max(np.abs(mlp_forward(q.theta, all_states)))),
        float(np.max(np.abs(mlp_forward(q.theta_minus, all_states)))),
    )
    tag = f"estimated x{safety:g}"
    return LipschitzBundle(
        L_sa=L_sa,
        L1=safety * ratio(np.abs(r - r_hat), dsa, ok),
        L2=safety * ratio(np.linalg.norm(g - g_hat, axis=1), dsa, ok),
        L3=safety * ratio(np.abs(Q - Q_hat), dsa, ok),
        L4=safety * ratio(np.abs(M - M_hat), dn, okn),
        D1=safety * float(np.max(np.abs(np.concatenate([r, r_hat])))),
        D2=safety * float(np.max(np.linalg.norm(np.vstack([g, g_hat]), axis=1))),
        D3=safety * sup_q,
        provenance={k: tag for k in CONSTANT_NAMES} | {"L_sa": "given"},
    )


# --------------------------------------------------------------------------- composed bound


def sigma_max(var_true_real, var_true_cand, var_hat_real) -> np.ndarray:
    """Largest of ``sigma(s,a)``, ``sigma(s_hat,a_hat)``, ``sigma_hat(s,a)`` and the two geometric means."""
    s = np.sqrt(_trace(var_true_real))
    s_c = np.sqrt(_trace(var_true_cand))
    s_h = np.sqrt(_trace(var_hat_real))
    return np.max(np.stack([s, s_c, s_h, np.sqrt(s_h * s), np.sqrt(s * s_c)]), axis=0)


def prop1_bound(k1: float, k2, C3: float, delta, e_kde, e_noise) -> tuple[np.ndarray, np.ndarray]:
    """``(main, remainder)`` with ``main = C1 C3^2 Delta^2 + C2 C3 Delta``.

    The remainder is the expansion of ``C1 X^2 + C2 X`` at
    ``X = C3 Delta + e_kde + e_noise`` minus ``main``:
    ``2 C1 C3 Delta e + C1 e^2 + C2 e`` with ``e = e_kde + e_noise``, so
    ``e^2`` carries the cross term ``2 e_kde e_noise``.
    """
    delta = np.asarray(delta, dtype=np.float64)
    e = np.asarray(e_kde) + np.asarray(e_noise)
    main = k1 * C3**2 * delta**2 + k2 * C3 * delta
    rem = 2.0 * k1 * C3 * delta * e + k1 * (e_kde**2 + 2.0 * e_kde * e_noise + e_noise**2) + k2 * e
    return main, rem


def verify_prop1(
    env,
    kde: KdeModel,
    q: QNetwork,
    lb: LipschitzBundle | Callable[[np.ndarray], LipschitzBundle],
    S,
    A,
    S_hat,
    A_hat,
    epsilon: float,
    epsilon_kde: float,
    rng: np.random.Generator,
    alpha: float | None = None,
    gamma: float | None = None,
    c2_form: str = "derived",
    L_sa: float | None = None,
) -> BoundReport:
    """Composed bound on the Q-update drift from a state-action shift ``Delta``.

    ``d`` uses ``s' ~ P*(s,a)`` and ``d_hat`` uses ``s'_hat ~ P_hat(s_hat,a_hat)``
    from the KDE; rewards come from ``env.reward_batch``. ``lb`` may be a
    callable that receives every state fed to Q (so radius-dependent
    constants can be built after sampling). Pass criterion as for
    :func:`verify_theorem1`.
    """
    alpha = q.alpha if alpha is None else alpha
    gamma = q.gamma if gamma is None else gamma
    if c2_form == "pointwise":
        raise ValueError("the composed bound needs a sup-norm C2")
    t = _theorem1_terms(env, kde, S, A, S_hat, A_hat, epsilon, epsilon_kde, L_sa, rng)
    n = len(t["S"])
    ones = np.ones(n, dtype=np.int64)
    zeros = np.zeros(n, dtype=bool)
    real = RolloutBatch(t["S"], t["A"], env.reward_batch(t["S"], t["A"]), t["s_next"], zeros, ones)
    cand = RolloutBatch(t["S_hat"], t["A_hat"], env.reward_batch(t["S_hat"], t["A_hat"]), t["s_next_hat"], zeros, ones)
    if callable(lb):
        lb = lb(np.vstack([real.s, cand.s, real.s_next, cand.s_next]))
    lhs = update_drift(q, real, cand, alpha, gamma)
    k1 = c1(lb, alpha, gamma)
    k2 = c2_derived(lb, alpha, gamma) if c2_form == "derived" else c2_stated(lb, alpha, gamma)
    C3 = 1.0 + t["L_sa"]
    main, rem = prop1_bound(k1, k2, C3, t["delta"], t["term_kde"], t["term_noise"])
    allowed = 1.0 - (1.0 - epsilon) * (1.0 - epsilon_kde)
    details = {
        "main": main,
        "remainder": rem,
        "delta": t["delta"],
        "sigma_max": sigma_max(t["var_true_real"], t["var_true_cand"], t["var_hat_real"]),
        "C1": k1,
        "C2": k2,
        "C3": C3,
        "bundle": lb,
    }
    return _probabilistic_report("prop1", lhs, main + rem, allowed, int((~t["mask"]).sum()), details)


# --------------------------------------------------------------------------- pair sets


def random_transition_pairs(env, n: int, rng: np.random.Generator, q: QNetwork | None = None, stress_frac: float = 0.0, max_shift: float | None = None) -> tuple[RolloutBatch, RolloutBatch]:
    """Aligned ``(d, d_hat)`` batches around the environment's state box.

    Ordinary pairs shift the state by a log-uniform magnitude in a random
    direction, resample the action half of the time and draw both next
    states from the environment. A ``stress_frac`` share of pairs instead
    starts near the origin, shifts along the state gradient of ``r - Q``
    for a linear ``q`` (where the quadratic term of the drift bound is
    tight) and reuses the real next state.
    """
    d, n_a = env.d_s, env.n_actions
    max_shift = float(np.max(env.state_high)) if max_shift is None else max_shift
    S = rng.uniform(env.state_low, env.state_high, (n, d)) / 2
    mag = max_shift * 10.0 ** rng.uniform(-3.0, 0.0, n)
    u = rng.standard_normal((n, d))
    A = rng.integers(n_a, size=n)
    A_hat = np.where(rng.random(n) < 0.5, A, rng.integers(n_a, size=n))
    stress = rng.random(n) < stress_frac
    if np.any(stress):
        if q is None or len(q.theta.weights) != 1:
            raise ValueError("stress pairs need a linear Q")
        S[stress] *= 0.05
        A_hat[stress] = A[stress]
        mag[stress] = max_shift * rng.uniform(0.5, 1.0, int(stress.sum()))
        grad = env.reward_w[None, :] - q.theta.weights[0][A[stress]]
        u[stress] = grad
    u /= np.maximum(np.linalg.norm(u, axis=1, keepdims=True), 1e-300)
    S_hat = S + mag[:, None] * u
    S2, S2_hat = env.step_batch(S, A, rng), env.step_batch(S_hat, A_hat, rng)
    S2_hat[stress] = S2[stress]
    ones, zeros = np.ones(n, dtype=np.int64), np.zeros(n, dtype=bool)
    real = RolloutBatch(S, A, env.reward_batch(S, A), S2, zeros, ones)
    cand = RolloutBatch(S_hat, A_hat, env.reward_batch(S_hat, A_hat), S2_hat, zeros.copy(), ones.copy())
    return real, cand
