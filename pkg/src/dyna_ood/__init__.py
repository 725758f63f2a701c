"""Dyna-style model-based RL with a nearest-neighbour filter on simulated rollouts."""

from .agent import QNetwork, dqn_update, dqn_update_batch
from .bounds import BoundReport, LipschitzBundle, verify_chebyshev, verify_prop1, verify_theorem1, verify_theorem2
from .config import ExperimentConfig, load_config
from .core import ReplayBuffer, RolloutBatch, Transition, rng_stream
from .dyna import DynaConfig, branched_rollout, run_dyna
from .env import DiscretePendulumEnv, LinearGaussianEnv, make_env
from .filter import FilterReport, RejectSchedule, apply_schedule, filter_ood
from .index import ExactIndex, HnswIndex, make_index
from .model import KdeModel, MlpGaussianModel, ModelEnsemble

__version__ = "0.1.0"
