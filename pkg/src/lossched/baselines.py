"""Non-learned schedules: threshold heuristics over cached optimization
statistics, dense grid search over the combination weight, fixed
generator/discriminator ratios, and data-size-proportional multi-task
schedules. Every schedule is a SchedulePicker, so the episode runner drives
them exactly like a learned policy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import SchedulePicker
from .features import HistoryCache
from .numkit import Rng, sample_categorical
from .supervised import SupervisedDataset, SplitSet, SupervisedTaskConfig, train_combined

HEURISTIC_KINDS = ("s1", "s2", "s3")


@dataclass(frozen=True)
class HeuristicSchedule:
    """Regularize when (A - B) / B > threshold, with (A, B) chosen by kind:
    s1: validation task loss vs training task loss;
    s2: L1 loss value vs validation task loss;
    s3: L1 gradient norm vs task-loss gradient norm."""

    kind: str
    threshold: float

    def __post_init__(self):
        if self.kind not in HEURISTIC_KINDS:
            raise ValueError(f"unknown heuristic kind {self.kind!r}")


def heuristic_decide(kind: str, threshold: float, cache: HistoryCache) -> int:
    """0 = task-loss action, 1 = L1 action."""
    if not cache.bootstrapped:
        raise RuntimeError("history cache not bootstrapped")
    if kind == "s1":
        a, b = cache.val_metric, cache.loss_values[0]
    elif kind == "s2":
        a, b = cache.loss_values[1], cache.val_metric
    elif kind == "s3":
        a, b = cache.grad_norms[1], cache.grad_norms[0]
    else:
        raise ValueError(f"unknown heuristic kind {kind!r}")
    if abs(b) < 1e-12:
        return 0
    return 1 if (a - b) / b > threshold else 0


class HeuristicPicker(SchedulePicker):
    def __init__(self, kind: str, threshold: float):
        self.schedule = HeuristicSchedule(kind, threshold)

    def pick(self, task, x, rng):
        return heuristic_decide(self.schedule.kind, self.schedule.threshold,
                                task.history), 0.0


def default_threshold_grid(lo: float = 1e-3, hi: float = 10.0, size: int = 10) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), size)


def tune_threshold(kind: str, thresholds, task_factory, rng: Rng):
    """Train one task per threshold; returns (best threshold, its final
    metrics, the full (threshold, metrics) table), best by validation."""
    from .core import run_episode
    if len(thresholds) == 0:
        raise ValueError("empty threshold grid")
    table = []
    for i, th in enumerate(thresholds):
        task = task_factory(rng.split(f"th{i}"))
        run_episode(task, HeuristicPicker(kind, float(th)), rng.split(f"run{i}"),
                    record=False)
        table.append((float(th), task.final_metrics()))
    best_th, best_metrics = min(table, key=lambda row: row[1]["val_raw"])
    return best_th, best_metrics, table


@dataclass(frozen=True)
class GridSearchSpec:
    lo: float = 1e-4
    hi: float = 10.0
    size: int = 50
    scale: str = "log"

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("grid size must be >= 1")
        if self.size > 1 and not self.lo < self.hi:
            raise ValueError("grid lo must be < hi")
        if self.scale not in ("log", "linear"):
            raise ValueError(f"unknown grid scale {self.scale!r}")

    def values(self) -> np.ndarray:
        if self.size == 1:
            return np.array([self.lo])
        if self.scale == "log":
            return np.logspace(np.log10(self.lo), np.log10(self.hi), self.size)
        return np.linspace(self.lo, self.hi, self.size)


def dense_grid_search(spec: GridSearchSpec, dataset: SupervisedDataset,
                      splits: SplitSet, cfg: SupervisedTaskConfig, rng: Rng):
    """Train the fixed combination task_loss + lambda * L1 at every grid
    point; returns (best lambda, its metrics, full table ordered by lambda)."""
    table = []
    for i, lam in enumerate(spec.values()):
        metrics = train_combined(dataset, splits, float(lam), cfg, rng.split(f"lam{i}"))
        table.append((float(lam), metrics))
    best_lam, best_metrics = min(table, key=lambda row: row[1]["val_raw"])
    return best_lam, best_metrics, table


class CyclePicker(SchedulePicker):
    """Deterministic cyclic action sequence."""

    def __init__(self, sequence):
        if not sequence:
            raise ValueError("empty schedule cycle")
        self.sequence = list(sequence)

    def pick(self, task, x, rng):
        return self.sequence[task.step_count % len(self.sequence)], 0.0


def fixed_gan_schedule(k: int, direction: str) -> CyclePicker:
    """'g_heavy' (1:K): one discriminator step then K generator steps;
    'd_heavy' (K:1): K discriminator steps then one generator step.
    Action 0 = generator update, action 1 = discriminator update."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if direction == "g_heavy":
        return CyclePicker([1] + [0] * k)
    if direction == "d_heavy":
        return CyclePicker([1] * k + [0])
    raise ValueError(f"unknown direction {direction!r}")


class FixedRatioPicker(SchedulePicker):
    """Samples task m with probability proportional to its training-set size."""

    def __init__(self, sizes):
        sizes = np.asarray(sizes, dtype=np.float64)
        if np.any(sizes <= 0):
            raise ValueError("sizes must be positive")
        self.probs = sizes / sizes.sum()

    def pick(self, task, x, rng):
        return sample_categorical(self.probs, rng), 0.0


class FineTunedPicker(SchedulePicker):
    """FixedRatio until the switch step, then target-task-only."""

    def __init__(self, sizes, switch_step: int, target: int = 0):
        self.ratio = FixedRatioPicker(sizes)
        self.switch_step = switch_step
        self.target = target

    def pick(self, task, x, rng):
        if task.step_count >= self.switch_step:
            return self.target, 0.0
        return self.ratio.pick(task, x, rng)
