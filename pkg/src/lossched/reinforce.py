"""Episode-level policy-gradient training: reward-weighted log-likelihood
over sampled decision sequences, a moving-average reward baseline, and
advantage clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import EpisodeTrace, PolicyPicker, TaskDivergedError, run_episode
from .numkit import Params, Rng, clip, ema_update
from .policy import ControllerPolicy, PolicyOptimizer


@dataclass
class BaselineState:
    """Moving-average reward baseline. The first observed reward initializes
    the average directly (first advantage is 0)."""

    decay: float = 0.9
    value: float = 0.0
    initialized: bool = False

    def update(self, reward: float) -> None:
        if not self.initialized:
            self.value = reward
            self.initialized = True
        else:
            self.value = ema_update(self.value, reward, self.decay)


@dataclass
class ReinforceConfig:
    sequences_per_update: int = 1       # S
    clip_range: float = 1.0             # advantage clip c
    baseline_decay: float = 0.9         # eta
    lr: float = 1e-3
    optimizer: str = "adam"
    max_episodes: int = 300
    plateau_window: int = 50
    plateau_tol: float = 0.01           # relative improvement threshold
    max_batches: int | None = None      # scanned-batch budget, None = unlimited


def advantage(reward: float, baseline: BaselineState, clip_range: float) -> float:
    base = reward if not baseline.initialized else baseline.value
    return clip(reward - base, -clip_range, clip_range)


def estimate_policy_gradient(traces: list[EpisodeTrace], baseline: BaselineState,
                             policy: ControllerPolicy, clip_range: float) -> Params:
    """(1/S) * sum_s adv_s * sum_t grad log p(Y_t|X_t), recomputed exactly at
    the recorded states."""
    if not traces:
        raise ValueError("no traces")
    total = policy.zero_grad()
    for trace in traces:
        if trace.steps_used == 0:
            continue
        adv = advantage(trace.terminal_reward, baseline, clip_range)
        if adv == 0.0:
            continue
        grad = policy.grad_log_prob_sum(trace.feature_matrix(),
                                        np.asarray(trace.decisions))
        for k in total:
            total[k] += adv * grad[k]
    s = len(traces)
    return {k: g / s for k, g in total.items()}


@dataclass
class TrainingLogRow:
    episode: int
    reward: float
    baseline: float
    advantage: float
    steps: int
    batches: int
    action_fracs: tuple

    def as_dict(self) -> dict:
        d = {"episode": self.episode, "reward": self.reward,
             "baseline": self.baseline, "advantage": self.advantage,
             "steps": self.steps, "batches": self.batches}
        for i, f in enumerate(self.action_fracs):
            d[f"action{i}_frac"] = f
        return d


@dataclass
class TrainingLog:
    rows: list[TrainingLogRow] = field(default_factory=list)
    episodes_run: int = 0
    episodes_failed: int = 0
    batches_scanned: int = 0
    stopped_because: str = ""

    def rewards(self) -> np.ndarray:
        return np.array([r.reward for r in self.rows if math.isfinite(r.reward)])


def _plateaued(rewards: list[float], window: int, tol: float) -> bool:
    if len(rewards) < 2 * window:
        return False
    recent = float(np.mean(rewards[-window:]))
    previous = float(np.mean(rewards[-2 * window:-window]))
    scale = max(abs(previous), 1e-12)
    return (recent - previous) / scale < tol


def train_controller(task_factory, policy: ControllerPolicy, cfg: ReinforceConfig,
                     rng: Rng) -> TrainingLog:
    """Alternates episode sampling and policy updates until the reward
    plateaus, the episode limit is hit, or the batch budget runs out.

    `task_factory(rng)` must return a freshly initialized task over the
    controller-training splits.
    """
    optimizer = PolicyOptimizer(policy.params, lr=cfg.lr, mode=cfg.optimizer)
    baseline = BaselineState(decay=cfg.baseline_decay)
    log = TrainingLog()
    rewards: list[float] = []
    episode = 0
    while episode < cfg.max_episodes:
        if cfg.max_batches is not None and log.batches_scanned >= cfg.max_batches:
            log.stopped_because = "budget"
            break
        traces = []
        for s in range(cfg.sequences_per_update):
            ep_rng = rng.split(f"ep{episode}s{s}")
            task = task_factory(ep_rng.split("task"))
            try:
                trace = run_episode(task, PolicyPicker(policy), ep_rng.split("decisions"))
            except TaskDivergedError:
                log.episodes_failed += 1
                continue
            traces.append(trace)
            log.batches_scanned += trace.batches_used
        episode += 1
        log.episodes_run += 1
        if not traces:
            log.rows.append(TrainingLogRow(episode, math.nan, baseline.value,
                                           0.0, 0, 0, ()))
            continue
        grad = estimate_policy_gradient(traces, baseline, policy, cfg.clip_range)
        optimizer.ascent_step(policy.params, grad)
        # advantages are logged against the baseline the update actually used
        advs = [advantage(t.terminal_reward, baseline, cfg.clip_range) for t in traces]
        for trace, adv in zip(traces, advs):
            baseline.update(trace.terminal_reward)
            rewards.append(trace.terminal_reward)
            fracs = tuple(c / max(trace.steps_used, 1) for c in trace.action_counts)
            log.rows.append(TrainingLogRow(episode, trace.terminal_reward,
                                           baseline.value, adv, trace.steps_used,
                                           trace.batches_used, fracs))
        if _plateaued(rewards, cfg.plateau_window, cfg.plateau_tol):
            log.stopped_because = "plateau"
            break
    if not log.stopped_because:
        log.stopped_because = "max_episodes"
    return log
