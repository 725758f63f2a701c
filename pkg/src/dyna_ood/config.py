"""Experiment configuration: a flat YAML mapping with dotted keys.

Nested mappings are flattened on load (``{"dyna": {"l": 5}}`` is the same
as ``{"dyna.l": 5}``). Every key must appear in :data:`DEFAULTS`; values
are type-checked against the default and the cross-key invariants are
validated by building the components once. ``DYNA_OOD_SEED`` in the
environment overrides ``seed``.
"""

from __future__ import annotations

import dataclasses
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .agent import QNetwork
from .core import rng_stream
from .dyna import DynaConfig
from .env import DiscretePendulumEnv, make_env
from .errors import ConfigError, ScheduleError
from .filter import RejectSchedule
from .model import KdeModel, MlpGaussianModel, ModelEnsemble

SEED_ENV_VAR = "DYNA_OOD_SEED"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "seeds": None,
    "output_dir": "runs/default",
    "env.name": "pendulum",
    "model.kind": "mlp",
    "model.ensemble_b": 1,
    "model.hidden": [64, 64],
    "model.activation": "tanh",
    "model.lr": 1e-3,
    "model.batch_size": 128,
    "model.epochs": 20,
    "model.lipschitz_cap": 0.0,
    "model.kernel": "gaussian",
    "model.bandwidth": None,
    "model.max_support": None,
    "agent.hidden": [64, 64],
    "agent.activation": "tanh",
    "agent.alpha": 1e-3,
    "agent.gamma": 0.99,
    "agent.sync_period": 100,
    "agent.batch_size": 64,
    "agent.real_fraction": 0.05,
    "agent.eps_start": 1.0,
    "agent.eps_end": 0.05,
    "agent.eps_fraction": 0.2,
    "dyna.k": 20,
    "dyna.h": 250,
    "dyna.l": 1,
    "dyna.n": 400,
    "dyna.m": None,
    "dyna.g": 20,
    "dyna.f": 250,
    "dyna.refit_epochs": None,
    "dyna.pretrain_samples": 2000,
    "dyna.pool_steps": None,
    "dyna.rollout_epsilon": 0.0,
    "dyna.eval_every": None,
    "dyna.eval_episodes": 5,
    "dyna.real_capacity": 1_000_000,
    "filter.schedule": None,
    "filter.epsilon": "off",
    "filter.key": "state",
    "filter.action_weight": 1.0,
    "filter.exact": False,
    "index.m_link": 16,
    "index.ef_construction": 200,
    "index.ef_search": 64,
    "output.record_wallclock": False,
    "bounds.checks": ["chebyshev", "theorem1", "theorem2", "prop1"],
    "bounds.seeds": [1, 2, 3, 4, 5],
    "bounds.epsilon": 0.1,
    "bounds.epsilon_kde": 0.1,
    "bounds.chebyshev_configs": 5,
    "bounds.chebyshev_trials": 100_000,
    "bounds.pair_trials": 1000,
    "bounds.theta_draws": 10,
    "bounds.d_s": 8,
    "bounds.safety": 1.2,
    "bounds.c2_form": "derived",
    "bounds.stress_frac": 0.2,
    "bounds.corrupt_c1": 1.0,
    "bench.sizes": [1000, 10_000, 100_000],
    "bench.dim": 8,
    "bench.queries": 1000,
}

_PENDULUM_KEYS = {f.name for f in dataclasses.fields(DiscretePendulumEnv) if f.init}
_LINGAUSS_KEYS = {"seed", "d_s", "n_actions", "a_norm", "b_scale", "sigma", "bound", "horizon", "gamma"}
ENV_KEYS = {"pendulum": _PENDULUM_KEYS, "lingauss": _LINGAUSS_KEYS}

MIN_PAIR_TRIALS = 100
MIN_CHEBYSHEV_TRIALS = 10_000
BOUND_CHECKS = ("chebyshev", "theorem1", "theorem2", "prop1")
ALIASES = {"agent.updates_per_step": "dyna.g"}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        # env.* keys are free-form per environment and never nest
        if isinstance(v, dict) and not key.startswith("env."):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, default):
    """Check ``value`` against the type of ``default``; ints widen to floats."""
    if key == "filter.schedule" and value is False:
        return "off"
    if key == "filter.epsilon":
        if value is False:  # YAML 1.1 reads a bare `off` as false
            return "off"
        if isinstance(value, str):
            v = value.strip().lower()
            if v in ("off", "dynamic"):
                return v
            if v in ("inf", "+inf", "infinity"):
                return math.inf
            raise ConfigError(key, f"expected a number, inf, 'off' or 'dynamic', got {value!r}")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(key, f"expected a number, inf, 'off' or 'dynamic', got {value!r}")
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                raise ConfigError(key, f"expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {value!r}")
        return list(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(key, f"expected a string, got {value!r}")
    return value


@dataclass
class ExperimentConfig:
    """Resolved flat settings plus factories for every component."""

    values: dict

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def seeds(self) -> list[int]:
        s = self.values["seeds"]
        return [int(x) for x in s] if s else [self.seed]

    @property
    def env_params(self) -> dict:
        return {k[4:]: v for k, v in self.values.items() if k.startswith("env.") and k != "env.name"}

    def make_env(self):
        return make_env(self.values["env.name"], **self.env_params)

    def schedule(self) -> RejectSchedule:
        v = self.values
        eps = v["filter.epsilon"]
        kind = v["filter.schedule"] or (eps if isinstance(eps, str) else "static")
        if isinstance(eps, str) and kind == "static":
            raise ConfigError("filter.epsilon", "a static schedule needs a numeric epsilon")
        return RejectSchedule(
            kind=kind,
            epsilon=eps if kind == "static" else math.inf,
            total_episodes=max(v["dyna.k"], 2),
            rollout_length=v["dyna.l"],
            key_mode=v["filter.key"],
            action_weight=v["filter.action_weight"],
        )

    def dyna_config(self) -> DynaConfig:
        v = self.values
        return DynaConfig(
            episodes=v["dyna.k"],
            horizon=v["dyna.h"],
            rollout_length=v["dyna.l"],
            n_branches=v["dyna.n"],
            rollout_size=v["dyna.m"],
            updates_per_step=v["dyna.g"],
            batch_size=v["agent.batch_size"],
            real_fraction=v["agent.real_fraction"],
            pretrain_samples=v["dyna.pretrain_samples"],
            refit_period=v["dyna.f"],
            refit_epochs=v["dyna.refit_epochs"],
            pool_steps=v["dyna.pool_steps"],
            rollout_epsilon=v["dyna.rollout_epsilon"],
            eps_start=v["agent.eps_start"],
            eps_end=v["agent.eps_end"],
            eps_fraction=v["agent.eps_fraction"],
            eval_every=v["dyna.eval_every"],
            eval_episodes=v["dyna.eval_episodes"],
            real_capacity=v["dyna.real_capacity"],
            schedule=self.schedule(),
            exact_index=v["filter.exact"],
            index_params={"m_link": v["index.m_link"], "ef_construction": v["index.ef_construction"], "ef_search": v["index.ef_search"]},
        )

    def make_model(self, env, seed: int):
        v = self.values
        if v["model.kind"] == "kde":
            return KdeModel(
                env.n_actions,
                kernel=v["model.kernel"],
                bandwidth=v["model.bandwidth"],
                action_weight=v["filter.action_weight"],
                max_support=v["model.max_support"],
                rng=rng_stream(seed, "model"),
            )
        members = [
            MlpGaussianModel(
                env.d_s,
                env.n_actions,
                rng_stream(seed, f"model/{i}"),
                hidden=tuple(v["model.hidden"]),
                activation=v["model.activation"],
                lr=v["model.lr"],
                batch_size=v["model.batch_size"],
                epochs=v["model.epochs"],
                lipschitz_cap=v["model.lipschitz_cap"],
                action_weight=v["filter.action_weight"],
            )
            for i in range(v["model.ensemble_b"])
        ]
        if len(members) == 1:
            return members[0]
        return ModelEnsemble(members, rng_stream(seed, "model/select"))

    def make_agent(self, env, seed: int) -> QNetwork:
        v = self.values
        return QNetwork.build(
            env.d_s,
            env.n_actions,
            rng_stream(seed, "agent/init"),
            hidden=tuple(v["agent.hidden"]),
            activation=v["agent.activation"],
            alpha=v["agent.alpha"],
            gamma=v["agent.gamma"],
            sync_period=v["agent.sync_period"],
        )

    def dump(self) -> str:
        """Resolved settings as flat YAML (infinite epsilon written as ``.inf``)."""
        return yaml.safe_dump(self.values, sort_keys=True, default_flow_style=None)


def resolve(raw: dict | None, environ: dict | None = None) -> ExperimentConfig:
    """Merge ``raw`` over the defaults, coerce types and validate."""
    if not raw:
        raise ConfigError("<file>", "configuration is empty")
    if not isinstance(raw, dict):
        raise ConfigError("<file>", "top level must be a mapping")
    flat = _flatten(raw)
    values = dict(DEFAULTS)
    env_name = flat.get("env.name", DEFAULTS["env.name"])
    if env_name not in ENV_KEYS:
        raise ConfigError("env.name", f"unknown environment {env_name!r}")
    for key, value in flat.items():
        key = ALIASES.get(key, key)
        if key.startswith("env.") and key != "env.name":
            if key[4:] not in ENV_KEYS[env_name]:
                raise ConfigError(key, f"unknown parameter for environment {env_name!r}")
            values[key] = value
            continue
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")
        values[key] = _coerce(key, value, DEFAULTS[key])
    values["filter.epsilon"] = _coerce("filter.epsilon", values["filter.epsilon"], None)

    environ = os.environ if environ is None else environ
    if environ.get(SEED_ENV_VAR):
        try:
            values["seed"] = int(environ[SEED_ENV_VAR])
        except ValueError:
            raise ConfigError("seed", f"{SEED_ENV_VAR} must be an integer") from None
        values["seeds"] = None
    cfg = ExperimentConfig(values)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    v = cfg.values
    if v["model.kind"] not in ("mlp", "kde"):
        raise ConfigError("model.kind", "must be 'mlp' or 'kde'")
    if v["model.ensemble_b"] < 1:
        raise ConfigError("model.ensemble_b", "must be >= 1")
    for key in ("model.lr", "agent.alpha"):
        if not v[key] > 0:
            raise ConfigError(key, "must be positive")
    if not 0.0 <= v["agent.gamma"] <= 1.0:
        raise ConfigError("agent.gamma", "must lie in [0, 1]")
    if v["agent.sync_period"] < 1:
        raise ConfigError("agent.sync_period", "must be >= 1")
    if v["filter.schedule"] not in (None, "static", "dynamic", "off"):
        raise ConfigError("filter.schedule", "must be static, dynamic or off")
    if v["filter.key"] not in ("state", "state_action"):
        raise ConfigError("filter.key", "must be state or state_action")
    eps = v["filter.epsilon"]
    if isinstance(eps, float) and not eps >= 0:
        raise ConfigError("filter.epsilon", "must be >= 0")
    if "dynamic" in (eps, v["filter.schedule"]) and v["dyna.k"] < 2:
        raise ConfigError("filter.epsilon", "dynamic schedule needs dyna.k >= 2")
    try:
        cfg.dyna_config()
    except ScheduleError as err:
        raise ConfigError("filter.epsilon", str(err)) from None
    try:
        cfg.make_env()
    except (TypeError, ValueError) as err:
        raise ConfigError("env.name", str(err)) from None
    if v["bounds.chebyshev_trials"] < MIN_CHEBYSHEV_TRIALS:
        raise ConfigError("bounds.chebyshev_trials", f"must be >= {MIN_CHEBYSHEV_TRIALS}")
    if v["bounds.pair_trials"] < MIN_PAIR_TRIALS:
        raise ConfigError("bounds.pair_trials", f"must be >= {MIN_PAIR_TRIALS}")
    unknown = set(v["bounds.checks"]) - set(BOUND_CHECKS)
    if unknown:
        raise ConfigError("bounds.checks", f"unknown checks {sorted(unknown)}")
    for key in ("bounds.epsilon", "bounds.epsilon_kde"):
        if not 0.0 < v[key] < 1.0:
            raise ConfigError(key, "must lie in (0, 1)")
    if v["bounds.safety"] < 1.0:
        raise ConfigError("bounds.safety", "must be >= 1")
    if v["bounds.c2_form"] not in ("derived", "stated"):
        raise ConfigError("bounds.c2_form", "must be 'derived' or 'stated'")
    if any(n < 0 for n in v["bench.sizes"]):
        raise ConfigError("bench.sizes", "sizes must be >= 0")


def read_raw(path) -> dict | None:
    """Parse a config file without resolving it."""
    path = Path(path)
    if not path.exists():
        raise ConfigError("<file>", f"{path} does not exist")
    try:
        return yaml.safe_load(path.read_text())
    except yaml.YAMLError as err:
        raise ConfigError("<file>", f"parse error: {err}") from None


def load_config(path, environ: dict | None = None) -> ExperimentConfig:
    return resolve(read_raw(path), environ)
