"""Shared-encoder multi-task surrogate: three regression heads over one
linear encoder, a 3-action space (one per task), and a perplexity-like
target metric. All targets derive from the same latent, so auxiliary-task
updates genuinely help the target task.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Action, ActionSpace, TaskDivergedError, TaskProcess
from .features import FeatureSpec, HistoryCache, extract_supervised_features
from .numkit import AdamState, Params, Rng, adam_step, sgd_step


@dataclass
class MultiTaskData:
    w_star: np.ndarray                 # (h, d) ground-truth encoder
    heads: list[np.ndarray]            # three (h,) functionals
    inputs: list[np.ndarray]           # per-task (P_m, d)
    targets: list[np.ndarray]          # per-task (P_m,)
    train_idx: list[np.ndarray]
    val_idx: list[np.ndarray]


def synth_multitask_data(d: int, h: int, sizes: tuple[int, int, int],
                         noise_std: float, rng: Rng,
                         val_frac: float = 0.2) -> MultiTaskData:
    """Task 0 target is the latent sum; tasks 1-2 are distinct random
    functionals of the same latent."""
    if any(s <= 0 for s in sizes):
        raise ValueError("sizes must be positive")
    w_star = rng.uniform(-0.5, 0.5, (h, d))
    heads = [np.ones(h)]
    heads += [rng.split(f"head{m}").uniform(-0.5, 0.5, h) for m in (1, 2)]
    inputs, targets, train_idx, val_idx = [], [], [], []
    for m, p in enumerate(sizes):
        tr = rng.split(f"task{m}")
        u = tr.uniform(-5.0, 5.0, (p, d))
        y = (u @ w_star.T) @ heads[m] + tr.normal(0.0, noise_std, p)
        inputs.append(u)
        targets.append(y)
        n_val = max(1, int(round(val_frac * p)))
        perm = tr.permutation(p)
        val_idx.append(perm[:n_val])
        train_idx.append(perm[n_val:])
    return MultiTaskData(w_star, heads, inputs, targets, train_idx, val_idx)


@dataclass
class MultiTaskConfig:
    d: int = 24
    h: int = 8
    sizes: tuple[int, int, int] = (2000, 6000, 6000)
    noise_std: float = 0.1
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    total_steps: int = 6000
    segment_len: int = 100
    val_every: int = 20
    mse_clamp: float = 50.0
    ema_decay: float = 0.9

    def with_(self, **kw) -> "MultiTaskConfig":
        return replace(self, **kw)


def mt_loss_and_grads(enc: np.ndarray, head: np.ndarray, u: np.ndarray, y: np.ndarray):
    """Per-task MSE and analytic gradients w.r.t. the shared encoder and the
    task head."""
    n = u.shape[0]
    latent = u @ enc.T
    e = latent @ head - y
    loss = float(np.mean(e * e))
    dpred = (2.0 / n) * e
    d_head = latent.T @ dpred
    d_enc = (dpred[:, None] * head[None, :]).T @ u
    return loss, d_enc, d_head


class MultiTaskTask(TaskProcess):
    """Action m runs one update of {encoder, head_m} on task m's loss."""

    episode_mode = "fixed_segments"

    def __init__(self, cfg: MultiTaskConfig, rng: Rng,
                 data: MultiTaskData | None = None):
        self.cfg = cfg
        self.max_steps = cfg.total_steps
        self.data = data or synth_multitask_data(cfg.d, cfg.h, cfg.sizes,
                                                 cfg.noise_std, rng.split("data"))
        self.action_space = ActionSpace([Action(m, m) for m in range(3)])
        init = rng.split("init")
        scale = 1.0 / math.sqrt(cfg.d)
        self.enc = init.uniform(-scale, scale, (cfg.h, cfg.d))
        self.heads = [init.uniform(-1.0 / math.sqrt(cfg.h), 1.0 / math.sqrt(cfg.h), cfg.h)
                      for _ in range(3)]
        self._opts = None
        if cfg.optimizer == "adam":
            self._opts = [AdamState.for_params(self._group_params(m), lr=cfg.lr)
                          for m in range(3)]
        self._batch_rng = rng.split("batches")
        self._orders = [self._batch_rng.permutation(len(self.data.train_idx[m]))
                        for m in range(3)]
        self._cursors = [0, 0, 0]
        self.feature_spec = FeatureSpec(n_losses=3)
        self.history = HistoryCache(n_losses=3, ema_decay=cfg.ema_decay)
        self.step_count = 0
        self.batches_scanned = 0
        self.perf_history: list[tuple[int, float]] = []
        self._bootstrap()

    def _group_params(self, m: int) -> Params:
        return {"enc": self.enc, f"head{m}": self.heads[m]}

    def _next_batch(self, m: int) -> np.ndarray:
        order, cur = self._orders[m], self._cursors[m]
        n = len(order)
        b = min(self.cfg.batch_size, n)
        if cur + b > n:
            self._orders[m] = order = self._batch_rng.permutation(n)
            self._cursors[m] = cur = 0
        chunk = order[cur:cur + b]
        self._cursors[m] = cur + b
        return self.data.train_idx[m][chunk]

    def _batch_loss_grads(self, m: int, idx: np.ndarray):
        u = self.data.inputs[m][idx]
        y = self.data.targets[m][idx]
        return mt_loss_and_grads(self.enc, self.heads[m], u, y)

    def task_val_mse(self, m: int = 0) -> float:
        idx = self.data.val_idx[m]
        latent = self.data.inputs[m][idx] @ self.enc.T
        e = latent @ self.heads[m] - self.data.targets[m][idx]
        return float(np.mean(e * e))

    def _grad_norm(self, d_enc, d_head) -> float:
        sq = float(np.sum(d_enc * d_enc) + np.sum(d_head * d_head))
        return math.sqrt(sq) / math.sqrt(d_enc.size + d_head.size)

    def _bootstrap(self) -> None:
        for m in range(3):
            idx = self.data.train_idx[m][self._orders[m][:self.cfg.batch_size]]
            loss, d_enc, d_head = self._batch_loss_grads(m, idx)
            self.history.touch(f"loss{m}", loss, 0)
            self.history.touch(f"grad{m}", self._grad_norm(d_enc, d_head), 0)
        self.history.touch("val", self.task_val_mse(0), 0)

    @property
    def feature_dim(self) -> int:
        return self.feature_spec.dim

    def features(self) -> np.ndarray:
        return extract_supervised_features(self.history, self.step_count,
                                           self.max_steps, self.feature_spec)

    def apply_action(self, action: Action) -> None:
        if action not in self.action_space:
            raise ValueError(f"invalid action {action}")
        m = action.loss_id
        self.step_count += 1
        idx = self._next_batch(m)
        loss, d_enc, d_head = self._batch_loss_grads(m, idx)
        if not math.isfinite(loss):
            raise TaskDivergedError(f"non-finite task-{m} loss at step {self.step_count}")
        grads = {"enc": d_enc, f"head{m}": d_head}
        if self._opts is not None:
            adam_step(self._group_params(m), grads, self._opts[m])
        else:
            sgd_step(self._group_params(m), grads, self.cfg.lr)
        self.batches_scanned += 1
        self.history.touch(f"loss{m}", loss, self.step_count)
        self.history.touch(f"grad{m}", self._grad_norm(d_enc, d_head), self.step_count)
        if self.step_count % self.cfg.val_every == 0:
            self.history.touch("val", self.task_val_mse(0), self.step_count)

    def converged(self) -> bool:
        return False

    def performance(self) -> float:
        """exp of the (clamped) target-task validation MSE: positive,
        strictly monotone, perplexity-like."""
        mse = self.task_val_mse(0)
        perf = float(np.exp(min(mse, self.cfg.mse_clamp)))
        self.perf_history.append((self.step_count, perf))
        return perf

    def episode_reward(self) -> float:
        return -self.task_val_mse(0)

    def parameter_groups(self) -> dict[int, Params]:
        return {m: self._group_params(m) for m in range(3)}

    def final_metrics(self) -> dict:
        mse = self.task_val_mse(0)
        return {
            "kind": "multitask",
            "val_raw": mse, "val_adjusted": mse,
            "test_raw": mse, "test_adjusted": mse,
            "steps": self.step_count, "batches": self.batches_scanned,
        }
