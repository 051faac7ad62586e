"""Unified iterative/alternate optimization: a task exposes losses and
parameter groups, an action is a legitimate (loss, group) pair, and an
episode runner lets any decision rule drive any task one update at a time.
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np

from .features import HistoryCache
from .numkit import Rng


class TaskDivergedError(RuntimeError):
    """Raised when a task produces a non-finite loss."""


@dataclass(frozen=True)
class Action:
    loss_id: int
    group_id: int


class ActionSpace:
    """Ordered set of legitimate (loss, group) pairs; decision indices are
    positions in this order, fixed for the task's lifetime."""

    def __init__(self, actions: list[Action]):
        if not actions:
            raise ValueError("empty action space")
        if len(set(actions)) != len(actions):
            raise ValueError("duplicate actions")
        self.actions = list(actions)

    def __len__(self):
        return len(self.actions)

    def __getitem__(self, idx: int) -> Action:
        return self.actions[idx]

    def index(self, action: Action) -> int:
        return self.actions.index(action)

    def __contains__(self, action: Action) -> bool:
        return action in self.actions


class TaskProcess(ABC):
    """One alternate-optimization process: parameter groups, losses, a
    feature extractor over its history cache, and a reward.

    episode_mode 'to_convergence': episodes end at convergence (terminal
    reward); 'fixed_segments': a single long run rewarded every segment.
    """

    action_space: ActionSpace
    history: HistoryCache
    episode_mode: str = "to_convergence"
    max_steps: int = 1000
    step_count: int = 0
    batches_scanned: int = 0

    @property
    def n_actions(self) -> int:
        return len(self.action_space)

    @property
    @abstractmethod
    def feature_dim(self) -> int: ...

    @abstractmethod
    def features(self) -> np.ndarray: ...

    @abstractmethod
    def apply_action(self, action: Action) -> None:
        """One update step of the chosen group w.r.t. the chosen loss."""

    @abstractmethod
    def converged(self) -> bool: ...

    @abstractmethod
    def episode_reward(self) -> float:
        """Terminal reward from the current parameters."""

    def performance(self) -> float:
        """Scalar task performance used by segment rewards."""
        raise NotImplementedError

    def parameter_groups(self) -> dict[int, dict[str, np.ndarray]]:
        """Group id -> parameter tensors (for isolation checks)."""
        raise NotImplementedError

    def final_metrics(self) -> dict:
        raise NotImplementedError


class SchedulePicker(ABC):
    """Decision rule consulted once per step; returns (action index, log-prob).

    Baseline schedules return log-prob 0.0 (they are deterministic or
    self-contained samplers); the policy picker returns the true sample
    log-probability so traces are usable for training.
    """

    @abstractmethod
    def pick(self, task: TaskProcess, x: np.ndarray, rng: Rng) -> tuple[int, float]: ...


class PolicyPicker(SchedulePicker):
    def __init__(self, policy, greedy: bool = False):
        self.policy = policy
        self.greedy = greedy

    def pick(self, task, x, rng):
        if self.greedy:
            probs = self.policy.forward(x)
            idx = int(np.argmax(probs))
            return idx, float(np.log(probs[idx]))
        return self.policy.sample(x, rng)


class ConstantPicker(SchedulePicker):
    def __init__(self, index: int):
        self.index = index

    def pick(self, task, x, rng):
        return self.index, 0.0


class UniformRandomPicker(SchedulePicker):
    def pick(self, task, x, rng):
        q = task.n_actions
        return int(rng.integers(0, q)), float(np.log(1.0 / q))


@dataclass
class EpisodeTrace:
    """Ordered record of one episode: states, decisions, log-probs, reward."""

    features: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    terminal_reward: float | None = None
    steps_used: int = 0
    batches_used: int = 0
    action_counts: np.ndarray | None = None

    def feature_matrix(self) -> np.ndarray:
        return np.asarray(self.features, dtype=np.float64)


def run_episode(task: TaskProcess, picker: SchedulePicker, rng: Rng,
                max_steps: int | None = None, record: bool = True) -> EpisodeTrace:
    """Drive `task` with `picker` for up to `max_steps` updates (or until the
    task reports convergence in to_convergence mode); attaches the terminal
    reward computed from the final parameters."""
    horizon = task.max_steps if max_steps is None else max_steps
    trace = EpisodeTrace(action_counts=np.zeros(task.n_actions, dtype=np.int64))
    start_batches = task.batches_scanned
    for _ in range(horizon):
        if task.episode_mode == "to_convergence" and task.converged():
            break
        x = task.features()
        idx, logp = picker.pick(task, x, rng)
        if not 0 <= idx < task.n_actions:
            raise ValueError(f"picker returned invalid action index {idx}")
        task.apply_action(task.action_space[idx])
        if record:
            trace.features.append(x)
            trace.decisions.append(idx)
            trace.log_probs.append(logp)
        trace.action_counts[idx] += 1
        trace.steps_used += 1
    trace.batches_used = task.batches_scanned - start_batches
    trace.terminal_reward = task.episode_reward()
    return trace


def run_guided_training(task: TaskProcess, policy, rng: Rng,
                        greedy: bool = False) -> dict:
    """Train a fresh task model under an already-trained policy (no policy
    updates); returns the task's final metrics."""
    picker = PolicyPicker(policy, greedy=greedy)
    run_episode(task, picker, rng, record=False)
    return task.final_metrics()


def run_schedule(task: TaskProcess, picker: SchedulePicker, rng: Rng,
                 max_steps: int | None = None) -> dict:
    """Run any baseline schedule to completion and return final metrics."""
    run_episode(task, picker, rng, max_steps=max_steps, record=False)
    return task.final_metrics()
