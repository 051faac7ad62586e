"""lossched: learning when to optimize which loss term, for iterative and
alternate optimization processes, via a policy-gradient-trained controller."""

__version__ = "0.1.0"

from .core import (Action, ActionSpace, EpisodeTrace, TaskDivergedError,
                   TaskProcess, run_episode, run_guided_training)
from .numkit import Rng
from .policy import ControllerPolicy, CriticNet, load_policy, save_policy

__all__ = [
    "Action", "ActionSpace", "ControllerPolicy", "CriticNet", "EpisodeTrace",
    "Rng", "TaskDivergedError", "TaskProcess", "load_policy", "run_episode",
    "run_guided_training", "save_policy",
]
