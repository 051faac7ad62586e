"""Scheduling policy p(y|x): linear or two-layer-MLP softmax head with exact
hand-derived log-probability gradients, plus the value net used by the PPO
trainer and a text checkpoint format shared by both.
"""

from __future__ import annotations

import copy

import numpy as np

from .numkit import AdamState, Params, Rng, adam_step, log_softmax, sample_categorical, softmax

CHECKPOINT_MAGIC = "schedctl-v1"


def _relu(x):
    return np.maximum(x, 0.0)


class ControllerPolicy:
    """Conditional distribution over Q actions given a K-dim state feature.

    arch 'linear': softmax(W x + b). arch 'mlp2': softmax(W2 relu(W1 x + b1) + b2).
    The logit-producing layer is zero-initialized so a fresh policy is exactly
    uniform; hidden weights are uniform +-1/sqrt(fan_in).
    """

    def __init__(self, arch: str, in_dim: int, out_dim: int, hidden: int = 32,
                 rng: Rng | None = None, params: Params | None = None):
        if arch not in ("linear", "mlp2"):
            raise ValueError(f"unknown controller arch {arch!r}")
        self.arch = arch
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.hidden = hidden if arch == "mlp2" else 0
        if params is not None:
            self.params = params
        elif arch == "linear":
            self.params = {
                "w": np.zeros((out_dim, in_dim)),
                "b": np.zeros(out_dim),
            }
        else:
            if rng is None:
                rng = Rng(0)
            bound = 1.0 / np.sqrt(in_dim)
            self.params = {
                "w1": rng.uniform(-bound, bound, (hidden, in_dim)),
                "b1": np.zeros(hidden),
                "w2": np.zeros((out_dim, hidden)),
                "b2": np.zeros(out_dim),
            }
        self._check_shapes()

    def _check_shapes(self):
        if self.arch == "linear":
            assert self.params["w"].shape == (self.out_dim, self.in_dim)
        else:
            assert self.params["w1"].shape == (self.hidden, self.in_dim)
            assert self.params["w2"].shape == (self.out_dim, self.hidden)

    def _logits(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.in_dim,):
            raise ValueError(f"feature dim {x.shape} != ({self.in_dim},)")
        if self.arch == "linear":
            return self.params["w"] @ x + self.params["b"]
        h = _relu(self.params["w1"] @ x + self.params["b1"])
        return self.params["w2"] @ h + self.params["b2"]

    def _logits_batch(self, X: np.ndarray) -> np.ndarray:
        if self.arch == "linear":
            return X @ self.params["w"].T + self.params["b"]
        H = _relu(X @ self.params["w1"].T + self.params["b1"])
        return H @ self.params["w2"].T + self.params["b2"]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return softmax(self._logits(np.asarray(x, dtype=np.float64)))

    def forward_batch(self, X: np.ndarray) -> np.ndarray:
        logits = self._logits_batch(np.asarray(X, dtype=np.float64))
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return e / e.sum(axis=1, keepdims=True)

    def log_prob(self, x: np.ndarray, decision: int) -> float:
        if not 0 <= decision < self.out_dim:
            raise ValueError(f"decision {decision} out of range")
        return float(log_softmax(self._logits(np.asarray(x, dtype=np.float64)))[decision])

    def log_prob_batch(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        logits = self._logits_batch(np.asarray(X, dtype=np.float64))
        shifted = logits - logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1))
        return shifted[np.arange(len(Y)), np.asarray(Y, dtype=np.int64)] - logz

    def sample(self, x: np.ndarray, rng: Rng) -> tuple[int, float]:
        logp = log_softmax(self._logits(np.asarray(x, dtype=np.float64)))
        idx = sample_categorical(np.exp(logp), rng)
        return idx, float(logp[idx])

    def grad_log_prob(self, x: np.ndarray, decision: int) -> Params:
        """Exact gradient of log p(decision|x) w.r.t. every parameter tensor."""
        x = np.asarray(x, dtype=np.float64)
        X = x[None, :]
        Y = np.array([decision])
        return self.grad_log_prob_sum(X, Y)

    def grad_log_prob_sum(self, X: np.ndarray, Y: np.ndarray,
                          weights: np.ndarray | None = None) -> Params:
        """Gradient of sum_i w_i * log p(Y_i|X_i), batched over rows of X."""
        X = np.asarray(X, dtype=np.float64)
        Y = np.asarray(Y, dtype=np.int64)
        n = X.shape[0]
        probs = self.forward_batch(X)
        dlogits = -probs
        dlogits[np.arange(n), Y] += 1.0
        if weights is not None:
            dlogits = dlogits * np.asarray(weights, dtype=np.float64)[:, None]
        if self.arch == "linear":
            return {"w": dlogits.T @ X, "b": dlogits.sum(axis=0)}
        pre = X @ self.params["w1"].T + self.params["b1"]
        H = _relu(pre)
        dH = dlogits @ self.params["w2"]
        dpre = dH * (pre > 0)
        return {
            "w1": dpre.T @ X,
            "b1": dpre.sum(axis=0),
            "w2": dlogits.T @ H,
            "b2": dlogits.sum(axis=0),
        }

    def zero_grad(self) -> Params:
        return {k: np.zeros_like(p) for k, p in self.params.items()}

    def clone(self) -> "ControllerPolicy":
        return ControllerPolicy(self.arch, self.in_dim, self.out_dim, self.hidden or 32,
                                params=copy.deepcopy(self.params))


class PolicyOptimizer:
    """Gradient-ascent optimizer for a policy (Adam default, plain SGD for
    the analytic tests). Non-finite gradients skip the update and count."""

    def __init__(self, policy_params: Params, lr: float = 1e-3, mode: str = "adam"):
        if mode not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer mode {mode!r}")
        self.mode = mode
        self.lr = lr
        self.skipped = 0
        self._adam = AdamState.for_params(policy_params, lr=lr) if mode == "adam" else None

    def ascent_step(self, params: Params, grad: Params) -> bool:
        if not all(np.all(np.isfinite(g)) for g in grad.values()):
            self.skipped += 1
            return False
        if self.mode == "sgd":
            for k in params:
                params[k] += self.lr * grad[k]
        else:
            neg = {k: -g for k, g in grad.items()}
            adam_step(params, neg, self._adam)
        return True

    def descent_step(self, params: Params, grad: Params) -> bool:
        return self.ascent_step(params, {k: -g for k, g in grad.items()})


class CriticNet:
    """Two-layer MLP scalar value function used by the PPO trainer."""

    def __init__(self, in_dim: int, hidden: int = 32, rng: Rng | None = None,
                 params: Params | None = None):
        self.in_dim = in_dim
        self.hidden = hidden
        if params is not None:
            self.params = params
        else:
            if rng is None:
                rng = Rng(0)
            bound = 1.0 / np.sqrt(in_dim)
            self.params = {
                "w1": rng.uniform(-bound, bound, (hidden, in_dim)),
                "b1": np.zeros(hidden),
                "w2": np.zeros((1, hidden)),
                "b2": np.zeros(1),
            }

    def value(self, x: np.ndarray) -> float:
        return float(self.value_batch(np.asarray(x, dtype=np.float64)[None, :])[0])

    def value_batch(self, X: np.ndarray) -> np.ndarray:
        H = _relu(X @ self.params["w1"].T + self.params["b1"])
        return (H @ self.params["w2"].T + self.params["b2"]).ravel()

    def grad_mse(self, X: np.ndarray, targets: np.ndarray) -> tuple[float, Params]:
        """Loss mean (v(x)-target)^2 and its gradient."""
        X = np.asarray(X, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        n = X.shape[0]
        pre = X @ self.params["w1"].T + self.params["b1"]
        H = _relu(pre)
        v = (H @ self.params["w2"].T + self.params["b2"]).ravel()
        err = v - targets
        loss = float(np.mean(err * err))
        dv = (2.0 / n) * err
        dH = dv[:, None] @ self.params["w2"]
        dpre = dH * (pre > 0)
        grads = {
            "w1": dpre.T @ X,
            "b1": dpre.sum(axis=0),
            "w2": (dv[None, :] @ H),
            "b2": np.array([dv.sum()]),
        }
        return loss, grads


def _format_tensor(name: str, arr: np.ndarray) -> str:
    dims = " ".join(str(d) for d in arr.shape)
    vals = " ".join(f"{v:.17g}" for v in arr.ravel())
    return f"{name} {arr.ndim} {dims} {vals}".rstrip()


def _parse_tensor(line: str) -> tuple[str, np.ndarray]:
    tokens = line.split()
    name = tokens[0]
    ndim = int(tokens[1])
    shape = tuple(int(t) for t in tokens[2:2 + ndim])
    count = int(np.prod(shape)) if shape else 1
    vals = tokens[2 + ndim:]
    if len(vals) != count:
        raise ValueError(f"checkpoint tensor {name}: expected {count} values, got {len(vals)}")
    return name, np.array([float(v) for v in vals]).reshape(shape)


def save_policy(policy, path, kind: str = "actor") -> None:
    arch = getattr(policy, "arch", "mlp2")
    hidden = policy.hidden
    out_dim = getattr(policy, "out_dim", 1)
    lines = [f"{CHECKPOINT_MAGIC} kind={kind} arch={arch} k={policy.in_dim} "
             f"h={hidden} q={out_dim}"]
    for name in sorted(policy.params):
        lines.append(_format_tensor(name, policy.params[name]))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_policy(path, expect_kind: str = "actor"):
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"checkpoint {path}: empty file")
    header = lines[0].split()
    if header[0] != CHECKPOINT_MAGIC:
        raise ValueError(f"checkpoint {path}: bad magic {header[0]!r}")
    fields = dict(tok.split("=", 1) for tok in header[1:])
    if fields.get("kind", "actor") != expect_kind:
        raise ValueError(f"checkpoint {path}: kind {fields.get('kind')!r}, "
                         f"expected {expect_kind!r}")
    k, h, q = int(fields["k"]), int(fields["h"]), int(fields["q"])
    arch = fields["arch"]
    params = dict(_parse_tensor(ln) for ln in lines[1:])
    if expect_kind == "critic":
        net = CriticNet(k, hidden=h, params=params)
        return net
    policy = ControllerPolicy(arch, k, q, h or 32, params=params)
    return policy
