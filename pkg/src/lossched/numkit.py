"""Deterministic numerical kernel: seeded RNG streams, samplers, softmax,
exponential moving averages, and the Adam update.

Everything is float64. All randomness flows through `Rng`, which supports
labeled sub-stream splitting so trials, data synthesis, and controller
sampling draw from independent reproducible streams.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

Params = dict[str, np.ndarray]


class Rng:
    """Counter-based random stream addressable by (seed, label path).

    The same seed always yields the same stream; `split(label)` derives an
    independent child stream whose state depends only on the seed and the
    sequence of labels, never on how much of the parent was consumed.
    """

    def __init__(self, seed: int, _path: tuple[str, ...] = ()):
        self.seed = int(seed)
        self.path = _path
        material = repr((self.seed, _path)).encode("utf-8")
        entropy = int.from_bytes(hashlib.sha256(material).digest()[:16], "little")
        self._gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

    def split(self, label) -> "Rng":
        return Rng(self.seed, self.path + (str(label),))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, mean=0.0, std=1.0, size=None):
        return self._gen.normal(mean, std, size)

    def integers(self, low, high, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={'/'.join(self.path)!r})"


def softmax(logits) -> np.ndarray:
    """Max-shifted softmax of a 1-D logit vector."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax: non-finite logits")
    e = np.exp(z - z.max())
    return e / e.sum()


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("log_softmax: non-finite logits")
    shifted = z - z.max()
    return shifted - np.log(np.exp(shifted).sum())


def sample_categorical(probs, rng: Rng) -> int:
    """Draw an index from a probability vector; validates the simplex."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("sample_categorical: probs must be a nonempty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("sample_categorical: negative or non-finite probabilities")
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"sample_categorical: probabilities sum to {total}, not 1")
    cdf = np.cumsum(p)
    idx = int(np.searchsorted(cdf, rng.uniform(), side="right"))
    return min(idx, p.size - 1)


def ema_update(prev: float, new: float, decay: float) -> float:
    """decay*prev + (1-decay)*new with decay in [0, 1)."""
    if not (0.0 <= decay < 1.0):
        raise ValueError(f"ema_update: decay {decay} outside [0, 1)")
    return decay * prev + (1.0 - decay) * new


def clip(x: float, lo: float, hi: float) -> float:
    if lo > hi:
        raise ValueError(f"clip: lo {lo} > hi {hi}")
    return min(max(x, lo), hi)


def l2_norm(v) -> float:
    return float(np.linalg.norm(np.asarray(v, dtype=np.float64).ravel()))


def params_l2_norm(params: Params) -> float:
    """L2 norm over all tensors of a parameter dict."""
    return float(np.sqrt(sum(float(np.sum(p * p)) for p in params.values())))


@dataclass
class AdamState:
    """Bias-corrected Adam accumulators for a dict of parameter tensors."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Params, lr: float = 1e-3, beta1: float = 0.9,
                   beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        state = cls(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        state.m = {k: np.zeros_like(p) for k, p in params.items()}
        state.v = {k: np.zeros_like(p) for k, p in params.items()}
        return state


def adam_step(params: Params, grads: Params, state: AdamState) -> Params:
    """One in-place Adam descent step on every tensor of `params`."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: shape mismatch for {key}: {g.shape} vs {p.shape}")
        m = state.m[key]
        v = state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def sgd_step(params: Params, grads: Params, lr: float) -> Params:
    """Plain in-place gradient descent step."""
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"sgd_step: shape mismatch for {key}: {g.shape} vs {p.shape}")
        p -= lr * g
    return params
