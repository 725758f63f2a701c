"""Command line entry point: ``train``, ``verify-bounds``, ``bench-index``, ``filter-demo``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
import yaml
from scipy import stats

from . import bounds as B
from .agent import QNetwork
from .core import ReplayBuffer, RolloutBatch, rng_stream, state_action_keys
from .dyna import pretrain_model, run_dyna
from .env import LinearGaussianEnv
from .errors import ConfigError, DynaOODError, NumericalError
from .filter import filter_ood
from .index import ExactIndex, HnswIndex, make_index
from .nn import MlpParams, init_mlp
from .config import DEFAULTS, ExperimentConfig, read_raw, resolve

log = logging.getLogger("dyna_ood")

METRICS_COLUMNS = (
    "real_steps",
    "episode",
    "eval_return_mean",
    "eval_return_std",
    "kept_count",
    "rejected_count",
    "eps_k",
    "model_nll",
    "wallclock_ms",
)
AGGREGATE_COLUMNS = ("real_steps", "n_seeds", "eval_return_mean", "eval_return_std", "ci95_low", "ci95_high")
BENCH_COLUMNS = ("n", "dim", "recall_at_1", "visited_median", "query_ms_mean", "build_s")


def _write_csv(path: Path, columns, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] for c in columns])


# --------------------------------------------------------------------------- train


def train_one(cfg: ExperimentConfig, seed: int, out: Path) -> list[dict]:
    """Run one seed and write ``metrics.csv``, ``trace.jsonl`` and ``config_resolved.yaml`` into ``out``."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "config_resolved.yaml").write_text(cfg.dump())
    env = cfg.make_env()
    model = cfg.make_model(env, seed)
    agent = cfg.make_agent(env, seed)
    dcfg = cfg.dyna_config()
    pretrain_model(env, model, dcfg.pretrain_samples, rng_stream(seed, "pretrain"))
    trace = None
    try:
        _, trace, _ = run_dyna(env, model, agent, dcfg, seed=seed, record_wallclock=cfg["output.record_wallclock"])
    except NumericalError as err:
        trace = err.trace
        raise
    finally:
        if trace is not None:
            _write_csv(out / "metrics.csv", METRICS_COLUMNS, trace.evals)
            with open(out / "trace.jsonl", "w") as fh:
                for rec in trace.steps:
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return trace.evals


def aggregate(per_seed: list[list[dict]]) -> list[dict]:
    """Mean return per evaluation point with a two-sided 95% Student-t interval across seeds."""
    rows = []
    for points in zip(*per_seed):
        x = np.array([p["eval_return_mean"] for p in points])
        n = len(x)
        mean = float(x.mean())
        sd = float(x.std(ddof=1)) if n > 1 else 0.0
        half = float(stats.t.ppf(0.975, n - 1) * sd / math.sqrt(n)) if n > 1 else math.nan
        rows.append(
            {
                "real_steps": points[0]["real_steps"],
                "n_seeds": n,
                "eval_return_mean": mean,
                "eval_return_std": sd,
                "ci95_low": mean - half,
                "ci95_high": mean + half,
            }
        )
    return rows


def cmd_train(cfg: ExperimentConfig) -> int:
    out = Path(cfg["output_dir"])
    seeds = cfg.seeds
    if len(seeds) == 1:
        train_one(cfg, seeds[0], out)
        print(f"wrote {out / 'metrics.csv'}")
        return 0
    runs = [train_one(cfg, s, out / f"seed_{s}") for s in seeds]
    _write_csv(out / "aggregate.csv", AGGREGATE_COLUMNS, aggregate(runs))
    print(f"wrote {len(seeds)} runs and {out / 'aggregate.csv'}")
    return 0


# --------------------------------------------------------------------------- verify-bounds


def _linear_q(d_s: int, rng: np.random.Generator, alpha: float, gamma: float, scale: float = 0.5) -> QNetwork:
    def params():
        return MlpParams([scale * rng.normal(size=(1, d_s))], [0.1 * rng.normal(size=1)], ["linear"])

    q = QNetwork(params(), alpha=alpha, gamma=gamma)
    q.theta_minus = params()
    return q


def suite_chebyshev(cfg: ExperimentConfig, seed: int) -> B.BoundReport:
    rng = rng_stream(seed, "bounds/chebyshev")
    reports = []
    for _ in range(cfg["bounds.chebyshev_configs"]):
        d = int(rng.integers(1, 5))
        mu = rng.normal(size=d)
        mu_hat = mu + 0.5 * rng.normal(size=d)
        sig = rng.uniform(0.0, 2.0, d) * (rng.random(d) > 0.1)
        sig_hat = rng.uniform(0.0, 2.0, d)
        eps = float(rng.uniform(0.05, 0.5))
        r = B.verify_chebyshev(mu, sig, mu_hat, sig_hat, eps, cfg["bounds.chebyshev_trials"], rng)
        reports.append(r)
    # every configuration has its own allowed rate, so the merged verdict is their conjunction
    merged = B.merge_reports(reports)
    merged.verdict = "pass" if all(r.passed for r in reports) else "fail"
    merged.allowed_violation_prob = max(r.allowed_violation_prob for r in reports)
    return merged


def suite_theorem1(cfg: ExperimentConfig, seed: int) -> B.BoundReport:
    rng = rng_stream(seed, "bounds/theorem1")
    env = LinearGaussianEnv.random(cfg["bounds.d_s"], 3, rng)
    kde, (S, A), (Sh, Ah) = B.theorem1_setup(env, 200, 10, cfg["bounds.pair_trials"], rng)
    return B.verify_theorem1(env, kde, S, A, Sh, Ah, cfg["bounds.epsilon"], cfg["bounds.epsilon_kde"], rng)


def suite_theorem2(cfg: ExperimentConfig, seed: int) -> list[B.BoundReport]:
    """Closed-form linear-Q checks (sup-norm and pointwise C2) plus an estimated-constant MLP check."""
    rng = rng_stream(seed, "bounds/theorem2")
    env = LinearGaussianEnv.random(4, 1, rng)
    n = cfg["bounds.pair_trials"]
    scale = cfg["bounds.corrupt_c1"]
    sup, point = [], []
    for _ in range(cfg["bounds.theta_draws"]):
        q = _linear_q(env.d_s, rng, alpha=0.1, gamma=0.0)
        real, cand = B.random_transition_pairs(env, n, rng, q, cfg["bounds.stress_frac"])
        lb = B.linear_q_bundle(q, env.reward_w, env.reward_u[0], np.vstack([real.s, cand.s, real.s_next, cand.s_next]))
        sup.append(B.verify_theorem2(q, lb, real, cand, c2_form=cfg["bounds.c2_form"], c1_scale=scale))
        point.append(B.verify_theorem2(q, lb, real, cand, c2_form="pointwise", c1_scale=scale))

    env3 = LinearGaussianEnv.random(4, 3, rng)
    q = QNetwork.build(4, 3, rng, hidden=(32, 32), alpha=0.01, gamma=0.9)
    q.theta_minus = init_mlp([4, 32, 32, 3], rng)
    real, cand = B.random_transition_pairs(env3, n, rng)
    lb = B.estimate_bundle(
        q, env3.reward_batch, lambda g, m: g.uniform(env3.state_low, env3.state_high, (m, 4)), rng, safety=cfg["bounds.safety"], pairs=(real, cand)
    )
    mlp = B.verify_theorem2(q, lb, real, cand, c2_form=cfg["bounds.c2_form"], c1_scale=scale)
    return [
        B.merge_reports(sup, "theorem2_linear"),
        B.merge_reports(point, "theorem2_linear_pointwise"),
        B.merge_reports([mlp], "theorem2_mlp_estimated"),
    ]


def suite_prop1(cfg: ExperimentConfig, seed: int) -> B.BoundReport:
    rng = rng_stream(seed, "bounds/prop1")
    env = LinearGaussianEnv.random(4, 1, rng)
    kde, (S, A), (Sh, Ah) = B.theorem1_setup(env, 200, 10, cfg["bounds.pair_trials"], rng)
    q = _linear_q(env.d_s, rng, alpha=0.1, gamma=0.9)
    L_sa = env.mean_lipschitz()

    def bundle(states):
        return B.linear_q_bundle(q, env.reward_w, env.reward_u[0], states, L_sa)

    return B.verify_prop1(env, kde, q, bundle, S, A, Sh, Ah, cfg["bounds.epsilon"], cfg["bounds.epsilon_kde"], rng, c2_form=cfg["bounds.c2_form"])


def run_bound_suite(cfg: ExperimentConfig, seed: int) -> list[B.BoundReport]:
    checks = cfg["bounds.checks"]
    reports = []
    if "chebyshev" in checks:
        reports.append(suite_chebyshev(cfg, seed))
    if "theorem1" in checks:
        reports.append(suite_theorem1(cfg, seed))
    if "theorem2" in checks:
        reports.extend(suite_theorem2(cfg, seed))
    if "prop1" in checks:
        reports.append(suite_prop1(cfg, seed))
    return reports


def cmd_verify_bounds(cfg: ExperimentConfig) -> int:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rows, failed = [], []
    for seed in cfg["bounds.seeds"]:
        for rep in run_bound_suite(cfg, seed):
            row = {"seed": seed, **rep.summary()}
            rows.append(row)
            print(" ".join(f"{k}={v}" for k, v in row.items()))
            if not rep.passed:
                failed.append(row)
    columns = ("seed", *B.BoundReport("", 0, np.zeros(0), np.zeros(0), 0, 0.0, 0.0, "pass").summary())
    _write_csv(out / "bounds.csv", columns, rows)
    if failed:
        for row in failed:
            print(f"FAILED {row['name']} seed={row['seed']} verdict={row['verdict']} violations={row['violations']}/{row['n_trials']}", file=sys.stderr)
        return 1
    print(f"all {len(rows)} bound reports pass")
    return 0


# --------------------------------------------------------------------------- bench-index


def bench_row(n: int, dim: int, n_queries: int, rng: np.random.Generator) -> dict:
    X = rng.random((n, dim))
    Q = rng.random((n_queries, dim))
    t0 = time.perf_counter()
    h = HnswIndex(dim, rng=rng)
    h.insert_batch(X)
    build = time.perf_counter() - t0
    t0 = time.perf_counter()
    d_h, _ = h.nn_distance_batch(Q)
    query = time.perf_counter() - t0
    visited = h.last_visited
    ex = ExactIndex(dim)
    ex.insert_batch(X)
    d_e, _ = ex.nn_distance_batch(Q)
    return {
        "n": n,
        "dim": dim,
        "recall_at_1": float(np.mean(d_h == d_e)),
        "visited_median": float(np.median(visited)),
        "query_ms_mean": 1000.0 * query / n_queries,
        "build_s": build,
    }


def cmd_bench_index(cfg: ExperimentConfig) -> int:
    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    rng = rng_stream(cfg.seed, "bench")
    rows = []
    for n in cfg["bench.sizes"]:
        if n == 0:
            log.warning("skipping n=0: nothing to index")
            continue
        row = bench_row(n, cfg["bench.dim"], cfg["bench.queries"], rng)
        print(" ".join(f"{k}={v}" for k, v in row.items()))
        rows.append(row)
    _write_csv(out / "bench.csv", BENCH_COLUMNS, rows)
    return 0


# --------------------------------------------------------------------------- filter-demo


def load_candidates(path) -> RolloutBatch:
    with np.load(path) as z:
        n = len(z["a"])
        step = z["step"] if "step" in z.files else np.ones(n, dtype=np.int64)
        done = z["done"] if "done" in z.files else np.zeros(n, dtype=bool)
        return RolloutBatch(z["s"], z["a"], z["r"], z["s_next"], done, step)


def cmd_filter_demo(args) -> int:
    real = ReplayBuffer.load(args.real)
    cand = load_candidates(args.candidates)
    S, A = real.arrays()[:2]
    n_actions = args.n_actions or int(max(A.max(initial=0), cand.a.max(initial=0)) + 1)
    keys = S if args.key_mode == "state" else state_action_keys(S, A, n_actions, args.action_weight)
    index = make_index(keys.shape[1], exact=args.exact, rng=rng_stream(args.seed, "index"))
    index.insert_batch(keys)
    kept, report = filter_ood(index, cand, args.epsilon, args.key_mode, n_actions, args.action_weight)
    print(json.dumps(report.as_dict(), indent=2))
    if args.out:
        np.savez(args.out, s=kept.s, a=kept.a, r=kept.r, s_next=kept.s_next, done=kept.done, step=kept.step)
    return 0


# --------------------------------------------------------------------------- entry point


def _config_from_args(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        raw = read_raw(args.config)
        if not isinstance(raw, dict) or not raw:
            return resolve(raw)  # raises with the precise reason
        raw = dict(raw)
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(item, "overrides take the form key=value")
        raw[key.strip()] = yaml.safe_load(value)
    if args.out:
        raw["output_dir"] = args.out
    return resolve(raw or {"seed": DEFAULTS["seed"]})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyna-ood", description="Dyna-style RL with an OOD filter on simulated rollouts.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("train", "train an agent and write metrics.csv / trace.jsonl"),
        ("verify-bounds", "run the bound verification suites"),
        ("bench-index", "benchmark the HNSW index against exact search"),
    ):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", nargs="?", help="YAML file with dotted keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
    fd = sub.add_parser("filter-demo", help="filter a saved candidate batch against a saved real buffer")
    fd.add_argument("--real", required=True, help="real buffer .npz (ReplayBuffer.save format)")
    fd.add_argument("--candidates", required=True, help="candidate .npz with s, a, r, s_next and optional done, step")
    fd.add_argument("--epsilon", type=float, required=True)
    fd.add_argument("--key-mode", choices=("state", "state_action"), default="state")
    fd.add_argument("--action-weight", type=float, default=1.0)
    fd.add_argument("--n-actions", type=int, default=None)
    fd.add_argument("--exact", action="store_true", help="use exact search instead of HNSW")
    fd.add_argument("--seed", type=int, default=0)
    fd.add_argument("--out", help="write the kept candidates to this .npz")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "filter-demo":
            return cmd_filter_demo(args)
        cfg = _config_from_args(args)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "verify-bounds":
            return cmd_verify_bounds(cfg)
        return cmd_bench_index(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except DynaOODError as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
