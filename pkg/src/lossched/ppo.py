"""Online controller training for long-horizon tasks: improvement-ratio
segment rewards and clipped-surrogate policy optimization with an
actor-critic pair and a periodically synchronized behavior policy.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .core import TaskDivergedError, TaskProcess
from .numkit import Rng, clip
from .policy import ControllerPolicy, CriticNet, PolicyOptimizer


@dataclass
class SegmentRewardState:
    """Performance values at segment boundaries plus the normalized
    improvement-ratio reward: scale * (P_new - P_last) over the mean
    per-segment improvement across the previous `lookback` segments
    (denominator magnitude floored at eps_den, sign preserved)."""

    segment_len: int
    lookback: int = 3
    scale: float = 1.0
    eps_den: float = 1e-6
    history: list = field(default_factory=list)

    def push(self, p_new: float) -> float | None:
        """Record a boundary value; returns the segment reward, or None
        while fewer than lookback+1 earlier boundaries exist."""
        reward = None
        if len(self.history) >= self.lookback + 1:
            p_last = self.history[-1]
            p_back = self.history[-1 - self.lookback]
            raw = (p_last - p_back) / self.lookback
            sign = 1.0 if raw >= 0 else -1.0
            denom = sign * max(abs(raw), self.eps_den)
            reward = self.scale * (p_new - p_last) / denom
        self.history.append(p_new)
        if len(self.history) > self.lookback + 1:
            self.history.pop(0)
        return reward


@dataclass
class Transition:
    state: np.ndarray
    decision: int
    behavior_log_prob: float     # recorded at collection time, never recomputed
    reward: float
    done: bool
    ret: float = 0.0


@dataclass
class PpoConfig:
    hidden: int = 32
    gamma: float = 0.95
    clip_eps: float = 0.2
    buffer_capacity: int = 2000
    minibatch: int = 64
    sync_every: int = 10          # behavior <- actor every N minibatch updates
    lr: float = 1e-3
    updates_per_segment: int = 4
    segment_len: int = 200
    lookback: int = 3
    reward_scale: float = 1.0
    eps_den: float = 1e-6
    reward_clip: float = 5.0      # segment rewards clipped at emission

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must be in [0, 1)")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")
        if self.buffer_capacity < self.minibatch:
            raise ValueError("buffer capacity must be >= minibatch")


def discounted_returns(rewards: np.ndarray, dones: np.ndarray, gamma: float) -> np.ndarray:
    """G_t = r_t + gamma * G_{t+1}, resetting at done flags."""
    out = np.zeros_like(rewards, dtype=np.float64)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + (0.0 if dones[t] else gamma * acc)
        out[t] = acc
    return out


@dataclass
class PpoDiagnostics:
    updates: int = 0
    skipped_transitions: int = 0
    last_critic_loss: float = 0.0
    last_clip_frac: float = 0.0


def ppo_update(actor: ControllerPolicy, critic: CriticNet, batch: list[Transition],
               cfg: PpoConfig, actor_opt: PolicyOptimizer, critic_opt: PolicyOptimizer,
               diag: PpoDiagnostics) -> None:
    """One minibatch update: clipped-surrogate ascent on the actor, squared
    error regression of returns on the critic."""
    if not batch:
        raise ValueError("empty minibatch")
    X = np.stack([t.state for t in batch])
    Y = np.array([t.decision for t in batch], dtype=np.int64)
    logp_b = np.array([t.behavior_log_prob for t in batch])
    rets = np.array([t.ret for t in batch])
    adv = rets - critic.value_batch(X)
    logp_new = actor.log_prob_batch(X, Y)
    log_ratio = np.clip(logp_new - logp_b, -30.0, 30.0)
    ratio = np.exp(log_ratio)
    ok = np.isfinite(ratio) & np.isfinite(adv)
    if not np.all(ok):
        diag.skipped_transitions += int(np.sum(~ok))
        ratio = np.where(ok, ratio, 1.0)
        adv = np.where(ok, adv, 0.0)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    unclipped_term = ratio * adv
    clipped_term = clipped * adv
    use_unclipped = unclipped_term <= clipped_term + 1e-18
    coeff = np.where(use_unclipped, ratio * adv, 0.0) / len(batch)
    grad = actor.grad_log_prob_sum(X, Y, weights=coeff)
    actor_opt.ascent_step(actor.params, grad)
    closs, cgrads = critic.grad_mse(X, rets)
    critic_opt.descent_step(critic.params, cgrads)
    diag.updates += 1
    diag.last_critic_loss = closs
    diag.last_clip_frac = float(np.mean(~use_unclipped))


@dataclass
class SegmentLogRow:
    step: int
    performance: float
    reward: float
    action_fracs: tuple

    def as_dict(self) -> dict:
        d = {"step": self.step, "performance": self.performance, "reward": self.reward}
        for i, f in enumerate(self.action_fracs):
            d[f"action{i}_frac"] = f
        return d


@dataclass
class OnlineLog:
    segments: list[SegmentLogRow] = field(default_factory=list)
    diagnostics: PpoDiagnostics = field(default_factory=PpoDiagnostics)
    aborted: bool = False
    total_steps: int = 0


def train_controller_online(task: TaskProcess, actor: ControllerPolicy,
                            critic: CriticNet, cfg: PpoConfig, rng: Rng,
                            total_steps: int | None = None) -> OnlineLog:
    """One continuous task run: the behavior policy picks every update, a
    segment reward is emitted every segment_len steps and assigned to all of
    that segment's transitions, and the actor/critic train from a replay
    buffer of the most recent transitions."""
    horizon = total_steps if total_steps is not None else task.max_steps
    behavior = actor.clone()
    seg_state = SegmentRewardState(cfg.segment_len, cfg.lookback,
                                   cfg.reward_scale, cfg.eps_den)
    seg_state.push(task.performance())
    buffer: deque[Transition] = deque(maxlen=cfg.buffer_capacity)
    log = OnlineLog()
    decision_rng = rng.split("decisions")
    sample_rng = rng.split("minibatches")
    pending: list[tuple[np.ndarray, int, float]] = []
    actor_opt = PolicyOptimizer(actor.params, lr=cfg.lr, mode="adam")
    critic_opt = PolicyOptimizer(critic.params, lr=cfg.lr, mode="adam")
    for step in range(horizon):
        x = task.features()
        idx, logp = behavior.sample(x, decision_rng)
        try:
            task.apply_action(task.action_space[idx])
        except TaskDivergedError:
            log.aborted = True
            break
        pending.append((x, idx, logp))
        log.total_steps += 1
        if task.step_count % cfg.segment_len != 0:
            continue
        perf = task.performance()
        raw = seg_state.push(perf)
        reward = 0.0 if raw is None else clip(raw, -cfg.reward_clip, cfg.reward_clip)
        n = len(pending)
        rewards = np.full(n, reward)
        dones = np.zeros(n, dtype=bool)
        dones[-1] = True
        rets = discounted_returns(rewards, dones, cfg.gamma)
        counts = np.zeros(task.n_actions)
        for (xs, ys, ls), g in zip(pending, rets):
            buffer.append(Transition(xs, ys, ls, reward, False, g))
            counts[ys] += 1
        buffer[-1].done = True
        log.segments.append(SegmentLogRow(task.step_count, perf, reward,
                                          tuple(counts / n)))
        pending.clear()
        if len(buffer) >= cfg.minibatch:
            buf_list = list(buffer)
            for u in range(cfg.updates_per_segment):
                pick = sample_rng.integers(0, len(buf_list), cfg.minibatch)
                batch = [buf_list[i] for i in pick]
                ppo_update(actor, critic, batch, cfg, actor_opt, critic_opt,
                           log.diagnostics)
                if log.diagnostics.updates % cfg.sync_every == 0:
                    behavior = actor.clone()
    return log
