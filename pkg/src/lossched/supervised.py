"""Supervised task processes: d-ary quadratic regression and binary MLP
classification, each with a task loss plus an L1 term as separately
schedulable objectives, synthetic data generation, analytic gradients,
validation-plateau convergence detection, and terminal rewards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Action, ActionSpace, TaskDivergedError, TaskProcess
from .features import FeatureSpec, HistoryCache, extract_supervised_features
from .numkit import AdamState, Params, Rng, adam_step, sgd_step

DATASET_MAGIC = "supervised-v1"


# ---------------------------------------------------------------------------
# data synthesis
# ---------------------------------------------------------------------------

@dataclass
class SupervisedDataset:
    kind: str                      # "regression" | "classification"
    u: np.ndarray                  # (P, d)
    v: np.ndarray                  # (P,) real targets or {0,1} labels
    seed: int
    noise_std: float = 0.0
    w_true: np.ndarray | None = None          # regression generator weights
    centers: np.ndarray | None = None         # classification cluster centers
    mix: np.ndarray | None = None              # informative->combo mixing matrix
    n_informative: int = 0
    n_combo: int = 0

    @property
    def n_samples(self) -> int:
        return self.u.shape[0]

    @property
    def dim(self) -> int:
        return self.u.shape[1]

    def noise_floor(self, idx: np.ndarray) -> float:
        """Irreducible MSE of the generating linear model on a split."""
        if self.kind != "regression":
            return 0.0
        resid = self.u[idx] @ self.w_true - self.v[idx]
        return float(np.mean(resid * resid))


@dataclass
class SplitSet:
    """Five-way partition: controller train/val, task train/val, test."""

    train_c: np.ndarray
    val_c: np.ndarray
    train_t: np.ndarray
    val_t: np.ndarray
    test: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"train_c": self.train_c, "val_c": self.val_c,
                "train_t": self.train_t, "val_t": self.val_t, "test": self.test}

    def validate(self, n: int) -> None:
        all_idx = np.concatenate(list(self.as_dict().values()))
        if len(all_idx) != n or len(np.unique(all_idx)) != n:
            raise ValueError("splits must partition the dataset exactly")


DEFAULT_SPLIT_FRACTIONS = (0.35, 0.15, 0.25, 0.10, 0.15)


def make_splits(n: int, fractions=DEFAULT_SPLIT_FRACTIONS, rng: Rng | None = None) -> SplitSet:
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {sum(fractions)}, not 1")
    if len(fractions) != 5:
        raise ValueError("need 5 split fractions")
    perm = rng.permutation(n) if rng is not None else np.arange(n)
    bounds = np.floor(np.cumsum(fractions) * n).astype(int)
    bounds[-1] = n
    pieces = np.split(perm, bounds[:-1])
    return SplitSet(*pieces)


def synth_regression_data(d: int, n_samples: int, noise_std: float, rng: Rng) -> SupervisedDataset:
    """Linear generator with Gaussian noise, fitted later by a quadratic model."""
    if d < 1 or n_samples < 1:
        raise ValueError("d and n_samples must be positive")
    w = rng.uniform(-0.5, 0.5, d)
    u = rng.uniform(-5.0, 5.0, (n_samples, d))
    xi = rng.normal(0.0, noise_std, n_samples)
    v = u @ w + xi
    return SupervisedDataset("regression", u, v, seed=rng.seed,
                             noise_std=noise_std, w_true=w)


def _sample_centers(d_inf: int, rng: Rng) -> np.ndarray:
    """Four hypercube vertices (+-1.5), two per class, first coordinate
    separating the classes and pairwise Hamming distance >= 2."""
    for _ in range(1000):
        signs = np.where(rng.uniform(size=(4, d_inf)) < 0.5, -1.0, 1.0)
        signs[0, 0] = signs[1, 0] = 1.0    # class 1 centers
        signs[2, 0] = signs[3, 0] = -1.0   # class 0 centers
        ok = True
        for i in range(4):
            for j in range(i + 1, 4):
                if np.sum(signs[i] != signs[j]) < 2:
                    ok = False
        if ok:
            return 1.5 * signs
    raise RuntimeError("failed to sample distinct cluster centers")


def synth_classification_data(d: int, n_samples: int, rng: Rng) -> SupervisedDataset:
    """Four-cluster binary data: 5% informative dims around hypercube-vertex
    centers, 5% linear combinations of them, the rest pure noise."""
    if d < 40:
        raise ValueError("classification synthesis needs d >= 40 (5% informative >= 2 dims)")
    d_inf = max(2, round(0.05 * d))
    d_combo = d_inf
    d_noise = d - d_inf - d_combo
    centers = _sample_centers(d_inf, rng)
    mix = rng.uniform(-1.0, 1.0, (d_inf, d_combo)) / math.sqrt(d_inf)
    labels = (rng.uniform(size=n_samples) < 0.5).astype(np.float64)
    which = rng.integers(0, 2, n_samples)           # which center within the class
    center_idx = np.where(labels == 1.0, which, 2 + which)
    u1 = centers[center_idx] + rng.normal(0.0, 1.0, (n_samples, d_inf))
    u2 = u1 @ mix
    u3 = rng.normal(0.0, 1.0, (n_samples, d_noise))
    u = np.concatenate([u1, u2, u3], axis=1)
    return SupervisedDataset("classification", u, labels, seed=rng.seed,
                             centers=centers, mix=mix,
                             n_informative=d_inf, n_combo=d_combo)


# ---------------------------------------------------------------------------
# models, losses, gradients
# ---------------------------------------------------------------------------

def init_regression_model(d: int, rng: Rng | None = None) -> Params:
    return {"A": np.zeros((d, d)), "b": np.zeros(d), "c": np.zeros(1)}


def regression_predict(params: Params, u: np.ndarray) -> np.ndarray:
    return np.einsum("pi,pi->p", u @ params["A"], u) + u @ params["b"] + params["c"][0]


def regression_mse_and_grads(params: Params, u: np.ndarray, v: np.ndarray):
    n = u.shape[0]
    e = regression_predict(params, u) - v
    loss = float(np.mean(e * e))
    ue = u * e[:, None]
    grads = {
        "A": (2.0 / n) * (ue.T @ u),
        "b": (2.0 / n) * (u.T @ e),
        "c": np.array([2.0 * np.mean(e)]),
    }
    return loss, grads


def init_mlp_model(d: int, hidden: tuple[int, int], rng: Rng) -> Params:
    h1, h2 = hidden
    def glorot(fan_in, fan_out):
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-a, a, (fan_out, fan_in))
    return {
        "w1": glorot(d, h1), "b1": np.zeros(h1),
        "w2": glorot(h1, h2), "b2": np.zeros(h2),
        "w3": glorot(h2, 1), "b3": np.zeros(1),
    }


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def mlp_logits(params: Params, u: np.ndarray) -> np.ndarray:
    h1 = np.maximum(u @ params["w1"].T + params["b1"], 0.0)
    h2 = np.maximum(h1 @ params["w2"].T + params["b2"], 0.0)
    return (h2 @ params["w3"].T + params["b3"]).ravel()


def mlp_bce_and_grads(params: Params, u: np.ndarray, v: np.ndarray):
    """Binary cross entropy from logits (softplus form) with exact backprop."""
    n = u.shape[0]
    pre1 = u @ params["w1"].T + params["b1"]
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ params["w2"].T + params["b2"]
    h2 = np.maximum(pre2, 0.0)
    s = (h2 @ params["w3"].T + params["b3"]).ravel()
    loss = float(np.mean(np.logaddexp(0.0, s) - v * s))
    ds = (_sigmoid(s) - v)[:, None] / n
    dh2 = ds @ params["w3"]
    dpre2 = dh2 * (pre2 > 0)
    dh1 = dpre2 @ params["w2"]
    dpre1 = dh1 * (pre1 > 0)
    grads = {
        "w3": ds.T @ h2, "b3": np.array([ds.sum()]),
        "w2": dpre2.T @ h1, "b2": dpre2.sum(axis=0),
        "w1": dpre1.T @ u, "b1": dpre1.sum(axis=0),
    }
    return loss, grads


def l1_value_and_subgrad(params: Params, scale: float = 1.0):
    value = scale * sum(float(np.sum(np.abs(p))) for p in params.values())
    grads = {k: scale * np.sign(p) for k, p in params.items()}
    return value, grads


def l1_snap_step(params: Params, step: float) -> None:
    """Sub-gradient step toward zero with snap-to-zero at crossing
    (soft threshold by `step`)."""
    for p in params.values():
        np.copyto(p, np.sign(p) * np.maximum(np.abs(p) - step, 0.0))


def param_count(params: Params) -> int:
    return sum(p.size for p in params.values())


def grad_norm_normalized(grads: Params) -> float:
    sq = sum(float(np.sum(g * g)) for g in grads.values())
    return math.sqrt(sq) / math.sqrt(param_count(grads))


# ---------------------------------------------------------------------------
# convergence and rewards
# ---------------------------------------------------------------------------

class ConvergenceTracker:
    """Plateau detector: converged once the best value has not improved by
    more than `tol` (relative) for `patience` consecutive recordings."""

    def __init__(self, patience: int, tol: float):
        self.patience = patience
        self.tol = tol
        self.best = math.inf
        self.stale = 0
        self.count = 0

    def record(self, value: float) -> None:
        self.count += 1
        if value < self.best - self.tol * abs(self.best) or self.count == 1:
            self.best = value
            self.stale = 0
        else:
            self.stale += 1

    @property
    def converged(self) -> bool:
        return self.stale >= self.patience


def check_convergence(history, patience: int, tol: float) -> bool:
    if len(history) == 0:
        raise ValueError("empty metric history")
    tracker = ConvergenceTracker(patience, tol)
    for value in history:
        tracker.record(value)
    return tracker.converged


def episode_reward_from_error(err: float, kind: str, c: float = 1.0,
                              form: str = "literal") -> float:
    """R = C/err for regression; classification default is the literal
    C/(err-1) form, with C/err available behind `form='inverse'`."""
    if kind == "regression" or form == "inverse":
        return c / max(err, 1e-9)
    denom = min(err, 1.0 - 1e-9) - 1.0
    return c / denom


# ---------------------------------------------------------------------------
# the task processes
# ---------------------------------------------------------------------------

@dataclass
class SupervisedTaskConfig:
    kind: str = "regression"
    d: int = 48
    n_samples: int = 84_000
    noise_std: float = 2.0
    batch_size: int = 128
    lr: float = 3e-4
    optimizer: str = "adam"          # update rule for the smooth loss
    l1_scale: float = 0.3            # lambda multiplying the L1 term
    max_steps: int = 14000
    val_every: int = 20
    patience: int = 40
    tol: float = 1e-4
    val_subsample: int = 2048        # 0 = always full validation split
    mlp_hidden: tuple[int, int] = (32, 32)
    reward_c: float = 1.0
    reward_form: str = "literal"
    ema_decay: float = 0.9
    keep_best: bool = True           # metrics/reward from the best-validation snapshot
    split_fractions: tuple = DEFAULT_SPLIT_FRACTIONS

    def with_(self, **kw) -> "SupervisedTaskConfig":
        return replace(self, **kw)


ROLE_SPLITS = ("controller", "guided", "union")


class SupervisedTask(TaskProcess):
    """Alternate optimization of a task loss (MSE or BCE) and an L1 term over
    a single parameter group. Action 0 = task loss, action 1 = L1."""

    episode_mode = "to_convergence"

    def __init__(self, dataset: SupervisedDataset, splits: SplitSet,
                 cfg: SupervisedTaskConfig, role: str, rng: Rng,
                 feature_spec: FeatureSpec | None = None):
        if role not in ROLE_SPLITS:
            raise ValueError(f"unknown role {role!r}")
        if dataset.kind != cfg.kind:
            raise ValueError(f"dataset kind {dataset.kind!r} != config kind {cfg.kind!r}")
        self.dataset = dataset
        self.splits = splits
        self.cfg = cfg
        self.role = role
        self.max_steps = cfg.max_steps
        if role == "controller":
            self.train_idx, self.val_idx = splits.train_c, splits.val_c
        elif role == "guided":
            self.train_idx, self.val_idx = splits.train_t, splits.val_t
        else:
            union = np.concatenate([splits.train_t, splits.val_t])
            self.train_idx = self.val_idx = union
        self.action_space = ActionSpace([Action(0, 0), Action(1, 0)])
        self.feature_spec = feature_spec or FeatureSpec(n_losses=2)
        self.rng = rng
        if cfg.kind == "regression":
            self.model = init_regression_model(cfg.d)
        else:
            self.model = init_mlp_model(cfg.d, cfg.mlp_hidden, rng.split("init"))
        self._opt = AdamState.for_params(self.model, lr=cfg.lr) if cfg.optimizer == "adam" else None
        self._batch_rng = rng.split("batches")
        self._order = self._batch_rng.permutation(len(self.train_idx))
        self._cursor = 0
        self.history = HistoryCache(n_losses=2, ema_decay=cfg.ema_decay)
        self.tracker = ConvergenceTracker(cfg.patience, cfg.tol)
        self.step_count = 0
        self.batches_scanned = 0
        self._best_val = math.inf
        self._best_model = None
        if cfg.val_subsample and cfg.val_subsample < len(self.val_idx):
            sub = rng.split("valsub").permutation(len(self.val_idx))[:cfg.val_subsample]
            self._val_quick = self.val_idx[np.sort(sub)]
        else:
            self._val_quick = self.val_idx
        self._bootstrap()

    # -- data plumbing ------------------------------------------------------

    def _next_batch(self) -> np.ndarray:
        n = len(self.train_idx)
        b = min(self.cfg.batch_size, n)
        if self._cursor + b > n:
            self._order = self._batch_rng.permutation(n)
            self._cursor = 0
        chunk = self._order[self._cursor:self._cursor + b]
        self._cursor += b
        return self.train_idx[chunk]

    def _peek_batch(self) -> np.ndarray:
        n = len(self.train_idx)
        b = min(self.cfg.batch_size, n)
        return self.train_idx[self._order[:b]]

    # -- losses -------------------------------------------------------------

    def _smooth_loss_and_grads(self, idx: np.ndarray):
        u, v = self.dataset.u[idx], self.dataset.v[idx]
        if self.cfg.kind == "regression":
            return regression_mse_and_grads(self.model, u, v)
        return mlp_bce_and_grads(self.model, u, v)

    def loss_and_grad(self, loss_id: int, idx: np.ndarray | None = None):
        """Loss value and gradient dict for either objective (L1 ignores idx)."""
        if loss_id == 0:
            return self._smooth_loss_and_grads(idx if idx is not None else self._peek_batch())
        if loss_id == 1:
            return l1_value_and_subgrad(self.model, self.cfg.l1_scale)
        raise ValueError(f"unknown loss id {loss_id}")

    def validation_metric(self, idx: np.ndarray | None = None,
                          model: Params | None = None) -> float:
        idx = self.val_idx if idx is None else idx
        model = self.model if model is None else model
        u, v = self.dataset.u[idx], self.dataset.v[idx]
        if self.cfg.kind == "regression":
            e = regression_predict(model, u) - v
            return float(np.mean(e * e))
        pred = mlp_logits(model, u) > 0
        return float(np.mean(pred != (v > 0.5)))

    def _record_val(self) -> float:
        val = self.validation_metric(self._val_quick)
        self.history.touch("val", val, self.step_count)
        self.tracker.record(val)
        if self.cfg.keep_best and val < self._best_val:
            self._best_val = val
            self._best_model = {k: p.copy() for k, p in self.model.items()}
        return val

    def _eval_model(self) -> Params:
        """Model the task reports on: best-validation snapshot when kept."""
        if self.cfg.keep_best and self._best_model is not None:
            return self._best_model
        return self.model

    def _bootstrap(self) -> None:
        idx = self._peek_batch()
        loss0, grads0 = self._smooth_loss_and_grads(idx)
        loss1, grads1 = l1_value_and_subgrad(self.model, self.cfg.l1_scale)
        self.history.touch("loss0", loss0, 0)
        self.history.touch("grad0", grad_norm_normalized(grads0), 0)
        self.history.touch("loss1", loss1, 0)
        self.history.touch("grad1", grad_norm_normalized(grads1), 0)
        self._record_val()

    # -- TaskProcess interface ----------------------------------------------

    @property
    def feature_dim(self) -> int:
        return self.feature_spec.dim

    def features(self) -> np.ndarray:
        return extract_supervised_features(self.history, self.step_count,
                                           self.max_steps, self.feature_spec)

    def apply_action(self, action: Action) -> None:
        if action not in self.action_space:
            raise ValueError(f"invalid action {action}")
        self.step_count += 1
        if action.loss_id == 0:
            idx = self._next_batch()
            loss, grads = self._smooth_loss_and_grads(idx)
            if not math.isfinite(loss):
                raise TaskDivergedError(f"non-finite task loss at step {self.step_count}")
            if self._opt is not None:
                adam_step(self.model, grads, self._opt)
            else:
                sgd_step(self.model, grads, self.cfg.lr)
            self.batches_scanned += 1
            self.history.touch("loss0", loss, self.step_count)
            self.history.touch("grad0", grad_norm_normalized(grads), self.step_count)
        else:
            # subgradient norm is scale*sqrt(nnz); avoids materializing signs
            scale = self.cfg.l1_scale
            total = 0.0
            nnz = 0
            size = 0
            for p in self.model.values():
                total += float(np.sum(np.abs(p)))
                nnz += int(np.count_nonzero(p))
                size += p.size
            l1_snap_step(self.model, self.cfg.lr * scale)
            self.history.touch("loss1", scale * total, self.step_count)
            self.history.touch("grad1", scale * math.sqrt(nnz / size), self.step_count)
        if self.step_count % self.cfg.val_every == 0:
            self._record_val()

    def converged(self) -> bool:
        return self.tracker.converged

    def episode_reward(self) -> float:
        err = self.validation_metric(model=self._eval_model())
        return episode_reward_from_error(err, self.cfg.kind, self.cfg.reward_c,
                                         self.cfg.reward_form)

    def performance(self) -> float:
        return self.validation_metric(self._val_quick)

    def parameter_groups(self) -> dict[int, Params]:
        return {0: self.model}

    def final_metrics(self) -> dict:
        model = self._eval_model()
        val_raw = self.validation_metric(model=model)
        test_raw = self.validation_metric(self.splits.test, model=model)
        if self.cfg.kind == "regression":
            val_adj = val_raw - self.dataset.noise_floor(self.val_idx)
            test_adj = test_raw - self.dataset.noise_floor(self.splits.test)
        else:
            val_adj, test_adj = val_raw, test_raw
        return {
            "kind": self.cfg.kind,
            "val_raw": val_raw, "val_adjusted": val_adj,
            "test_raw": test_raw, "test_adjusted": test_adj,
            "steps": self.step_count, "batches": self.batches_scanned,
        }


def train_combined(dataset: SupervisedDataset, splits: SplitSet,
                   lam: float, cfg: SupervisedTaskConfig, rng: Rng) -> dict:
    """Fixed-combination training of task_loss + lam * L1 by proximal
    steps: every step updates on the smooth loss then soft-thresholds by
    lr * lam (the same L1 rule the scheduled task uses). Same data plumbing,
    convergence rule, and metric schema as the task."""
    task = SupervisedTask(dataset, splits, cfg.with_(l1_scale=lam), "guided", rng)
    while task.step_count < cfg.max_steps and not task.converged():
        idx = task._next_batch()
        loss, grads = task._smooth_loss_and_grads(idx)
        if not math.isfinite(loss):
            raise TaskDivergedError("non-finite combined loss")
        if task._opt is not None:
            adam_step(task.model, grads, task._opt)
        else:
            sgd_step(task.model, grads, cfg.lr)
        l1_snap_step(task.model, cfg.lr * lam)
        task.batches_scanned += 1
        task.step_count += 1
        if task.step_count % cfg.val_every == 0:
            task._record_val()
    return task.final_metrics()


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def _fmt(values) -> str:
    return " ".join(f"{v:.17g}" for v in np.asarray(values).ravel())


def save_dataset(dataset: SupervisedDataset, path) -> None:
    lines = [f"{DATASET_MAGIC} kind={dataset.kind} d={dataset.dim} "
             f"p={dataset.n_samples} seed={dataset.seed} "
             f"noise_std={dataset.noise_std:.17g} inf={dataset.n_informative} "
             f"combo={dataset.n_combo}"]
    if dataset.w_true is not None:
        lines.append("w_true " + _fmt(dataset.w_true))
    if dataset.centers is not None:
        lines.append("centers " + _fmt(dataset.centers))
        lines.append("mix " + _fmt(dataset.mix))
    for p in range(dataset.n_samples):
        lines.append(_fmt(dataset.u[p]) + " " + f"{dataset.v[p]:.17g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> SupervisedDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    header = lines[0].split()
    if header[0] != DATASET_MAGIC:
        raise ValueError(f"dataset {path}: bad magic")
    meta = dict(tok.split("=", 1) for tok in header[1:])
    kind, d, p = meta["kind"], int(meta["d"]), int(meta["p"])
    n_inf, n_combo = int(meta["inf"]), int(meta["combo"])
    w_true = centers = mix = None
    row = 1
    while row < len(lines) and lines[row].split(" ", 1)[0] in ("w_true", "centers", "mix"):
        name, rest = lines[row].split(" ", 1)
        vals = np.array([float(t) for t in rest.split()])
        if name == "w_true":
            w_true = vals
        elif name == "centers":
            centers = vals.reshape(4, n_inf)
        else:
            mix = vals.reshape(n_inf, n_combo)
        row += 1
    data = np.array([[float(t) for t in ln.split()] for ln in lines[row:row + p]])
    if data.shape != (p, d + 1):
        raise ValueError(f"dataset {path}: expected {p}x{d + 1} table, got {data.shape}")
    return SupervisedDataset(kind, data[:, :d], data[:, d], seed=int(meta["seed"]),
                             noise_std=float(meta["noise_std"]), w_true=w_true,
                             centers=centers, mix=mix,
                             n_informative=n_inf, n_combo=n_combo)


def save_splits(splits: SplitSet, path) -> None:
    with open(path, "w") as fh:
        for name, idx in splits.as_dict().items():
            fh.write(name + " " + " ".join(str(int(i)) for i in idx) + "\n")


def load_splits(path) -> SplitSet:
    parts = {}
    with open(path) as fh:
        for line in fh:
            name, *vals = line.split()
            parts[name] = np.array([int(v) for v in vals], dtype=np.int64)
    return SplitSet(**parts)
