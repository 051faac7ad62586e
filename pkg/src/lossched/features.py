"""Optimization-state features backed by a lazily refreshed history cache.

Quantities (per-loss values, per-loss gradient norms, validation metric and
its moving averages) are stored with the step at which they were last
computed; a quantity is recomputed only when the action that produces it
runs, or on the task's validation cadence.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numkit import clip, ema_update

VALIDATION_STATS = 4  # value, EMA, EMA of 1st difference, EMA of 2nd difference

SUPERVISED_BLOCKS = ("progress", "grad_norms", "loss_values", "validation")


@dataclass(frozen=True)
class FeatureSpec:
    """Ordered feature blocks for the supervised extractor; ablation drops one."""

    n_losses: int
    blocks: tuple[str, ...] = SUPERVISED_BLOCKS

    def __post_init__(self):
        unknown = set(self.blocks) - set(SUPERVISED_BLOCKS)
        if unknown:
            raise ValueError(f"unknown feature blocks {sorted(unknown)}")
        if len(set(self.blocks)) != len(self.blocks):
            raise ValueError("duplicate feature blocks")

    @property
    def dim(self) -> int:
        widths = {
            "progress": 1,
            "grad_norms": self.n_losses,
            "loss_values": self.n_losses,
            "validation": VALIDATION_STATS,
        }
        return sum(widths[b] for b in self.blocks)

    def ablate(self, block: str) -> "FeatureSpec":
        if block not in self.blocks:
            raise ValueError(f"cannot ablate {block!r}: not enabled")
        return FeatureSpec(self.n_losses, tuple(b for b in self.blocks if b != block))


class HistoryCache:
    """Latest values of optimization statistics, stamped with the step at
    which each was actually computed."""

    def __init__(self, n_losses: int, ema_decay: float = 0.9):
        self.n_losses = n_losses
        self.ema_decay = ema_decay
        self.loss_values = np.full(n_losses, np.nan)
        self.grad_norms = np.full(n_losses, np.nan)
        self.val_metric = np.nan
        self.val_ema = np.nan
        self.dval_ema = np.nan
        self.d2val_ema = np.nan
        self.scalars: dict[str, float] = {}
        self.stamps: dict[str, int] = {}
        self._prev_val = np.nan
        self._prev_dval = np.nan

    def touch(self, quantity: str, value: float, step: int) -> None:
        """Refresh one cache entry. Quantities: 'loss<m>', 'grad<m>', 'val',
        or any named scalar (e.g. 'is', 'd_err')."""
        value = float(value)
        if quantity.startswith("loss") and quantity[4:].isdigit():
            self.loss_values[int(quantity[4:])] = value
        elif quantity.startswith("grad") and quantity[4:].isdigit():
            self.grad_norms[int(quantity[4:])] = value
        elif quantity == "val":
            self._roll_val(value)
        else:
            self.scalars[quantity] = value
        self.stamps[quantity] = step

    def _roll_val(self, value: float) -> None:
        eta = self.ema_decay
        if np.isnan(self.val_metric):
            self.val_metric = value
            self.val_ema = value
            self.dval_ema = 0.0
            self.d2val_ema = 0.0
            self._prev_val = value
            self._prev_dval = 0.0
            return
        delta = value - self.val_metric
        ddelta = delta - self._prev_dval
        self._prev_dval = delta
        self.val_metric = value
        self.val_ema = ema_update(self.val_ema, value, eta)
        self.dval_ema = ema_update(self.dval_ema, delta, eta)
        self.d2val_ema = ema_update(self.d2val_ema, ddelta, eta)

    @property
    def bootstrapped(self) -> bool:
        core = np.concatenate([self.loss_values, self.grad_norms, [self.val_metric]])
        return bool(np.all(np.isfinite(core)))

    def validation_stats(self) -> np.ndarray:
        return np.array([self.val_metric, self.val_ema, self.dval_ema, self.d2val_ema])


def extract_supervised_features(cache: HistoryCache, t: int, horizon: int,
                                spec: FeatureSpec) -> np.ndarray:
    """[t/T] + normalized grad norms + loss values + validation stats,
    restricted to the blocks enabled in `spec`."""
    if not cache.bootstrapped:
        raise RuntimeError("history cache not bootstrapped")
    parts = []
    for block in spec.blocks:
        if block == "progress":
            parts.append(np.array([t / horizon if horizon > 0 else 0.0]))
        elif block == "grad_norms":
            parts.append(cache.grad_norms.copy())
        elif block == "loss_values":
            parts.append(cache.loss_values.copy())
        elif block == "validation":
            parts.append(cache.validation_stats())
    return np.concatenate(parts)


GAN_FEATURE_DIM = 9


def extract_gan_features(cache: HistoryCache, t: int, horizon: int) -> np.ndarray:
    """[t/T, g1, g2, ln(g1/g2), l1, l2, l1/l2, IS, D_err] with clamped ratios."""
    if not cache.bootstrapped or "is" not in cache.scalars or "d_err" not in cache.scalars:
        raise RuntimeError("GAN history cache not bootstrapped")
    g1, g2 = cache.grad_norms[0], cache.grad_norms[1]
    l1, l2 = cache.loss_values[0], cache.loss_values[1]
    if g1 < 1e-12 or g2 < 1e-12:
        log_ratio = 10.0 if g1 >= g2 else -10.0
        if g1 < 1e-12 and g2 < 1e-12:
            log_ratio = 0.0
    else:
        log_ratio = clip(float(np.log(g1 / g2)), -10.0, 10.0)
    loss_ratio = clip(l1 / l2, -100.0, 100.0) if abs(l2) >= 1e-12 else 100.0 * np.sign(l1 or 1.0)
    return np.array([
        t / horizon if horizon > 0 else 0.0,
        g1, g2, log_ratio,
        l1, l2, loss_ratio,
        cache.scalars["is"], cache.scalars["d_err"],
    ])
