"""Desk-scale GAN task: 2-D Gaussian-mixture data, small generator and
discriminator MLPs with exact backprop (optional per-layer batch
standardization), the generator/discriminator loss split as two schedulable
actions, and an analytic-mixture proxy inception score.

All discriminator terms are computed in logits space (softplus forms of
log sigma and log(1-sigma)), so no log-argument clamping is ever needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .core import Action, ActionSpace, TaskDivergedError, TaskProcess
from .features import GAN_FEATURE_DIM, HistoryCache, extract_gan_features
from .numkit import AdamState, Params, Rng, adam_step

_BN_EPS = 1e-5


# ---------------------------------------------------------------------------
# mixture data and the analytic component classifier
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MixtureSpec:
    """Isotropic Gaussian mixture on a ring."""

    n_components: int = 8
    radius: float = 2.0
    std: float = 0.05

    def means(self) -> np.ndarray:
        angles = 2.0 * np.pi * np.arange(self.n_components) / self.n_components
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        comps = rng.integers(0, self.n_components, n)
        return self.means()[comps] + rng.normal(0.0, self.std, (n, 2))


class ProxyClassifier:
    """Bayes posterior p(component | point) under a MixtureSpec; stands in
    for a trained classifier when scoring generated samples."""

    def __init__(self, spec: MixtureSpec):
        self.spec = spec
        self._means = spec.means()

    def posterior(self, points: np.ndarray) -> np.ndarray:
        d2 = ((points[:, None, :] - self._means[None, :, :]) ** 2).sum(axis=2)
        logp = -d2 / (2.0 * self.spec.std ** 2)
        logp -= logp.max(axis=1, keepdims=True)
        p = np.exp(logp)
        return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# three-layer nets with hand-derived backprop
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    width: int = 32
    dz: int = 4
    activation: str = "lrelu"      # "relu" | "lrelu" (slope 0.2)
    batchnorm: bool = False

    def describe(self) -> str:
        return f"w{self.width}-z{self.dz}-{self.activation}-{'bn' if self.batchnorm else 'nobn'}"


ARCH_GRID = {
    "width": (32, 64, 128),
    "dz": (4, 8),
    "activation": ("relu", "lrelu"),
    "batchnorm": (False, True),
}


def sample_gan_architecture(rng: Rng) -> ArchSpec:
    """Uniform draw from the 3x2x2x2 = 24 point architecture grid."""
    return ArchSpec(
        width=ARCH_GRID["width"][rng.integers(0, 3)],
        dz=ARCH_GRID["dz"][rng.integers(0, 2)],
        activation=ARCH_GRID["activation"][rng.integers(0, 2)],
        batchnorm=ARCH_GRID["batchnorm"][rng.integers(0, 2)],
    )


def _act(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(x, 0.0)
    return np.where(x > 0, x, 0.2 * x)


def _dact(x: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (x > 0).astype(np.float64)
    return np.where(x > 0, 1.0, 0.2)


def init_net(in_dim: int, width: int, out_dim: int, rng: Rng) -> Params:
    def glorot(fi, fo):
        a = math.sqrt(6.0 / (fi + fo))
        return rng.uniform(-a, a, (fo, fi))
    return {
        "w0": glorot(in_dim, width), "b0": np.zeros(width),
        "w1": glorot(width, width), "b1": np.zeros(width),
        "w2": glorot(width, out_dim), "b2": np.zeros(out_dim),
    }


def net_forward(params: Params, x: np.ndarray, arch: ArchSpec):
    """Two hidden layers (optional batch standardization before the
    activation), linear output. Returns (out, caches)."""
    caches = []
    h = x
    for i in (0, 1):
        pre = h @ params[f"w{i}"].T + params[f"b{i}"]
        if arch.batchnorm:
            var = pre.var(axis=0)
            zhat = (pre - pre.mean(axis=0)) / np.sqrt(var + _BN_EPS)
        else:
            var, zhat = None, pre
        out = _act(zhat, arch.activation)
        caches.append((h, pre, zhat, var))
        h = out
    pre = h @ params["w2"].T + params["b2"]
    caches.append((h, pre, None, None))
    return pre, caches


def net_backward(params: Params, caches, dout: np.ndarray, arch: ArchSpec):
    """Gradients of all net parameters plus the gradient w.r.t. the input."""
    grads = {}
    h_in, _, _, _ = caches[2]
    grads["w2"] = dout.T @ h_in
    grads["b2"] = dout.sum(axis=0)
    dh = dout @ params["w2"]
    for i in (1, 0):
        h_in, pre, zhat, var = caches[i]
        dz = dh * _dact(zhat, arch.activation)
        if arch.batchnorm:
            n = dz.shape[0]
            inv = 1.0 / np.sqrt(var + _BN_EPS)
            dpre = inv * (dz - dz.mean(axis=0) - zhat * (dz * zhat).sum(axis=0) / n)
        else:
            dpre = dz
        grads[f"w{i}"] = dpre.T @ h_in
        grads[f"b{i}"] = dpre.sum(axis=0)
        dh = dpre @ params[f"w{i}"]
    return grads, dh


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def gan_losses_and_grads(gen_params: Params, disc_params: Params, arch: ArchSpec,
                         real: np.ndarray, z: np.ndarray, loss_id: int,
                         nonsaturating: bool = False):
    """loss_id 0: generator objective, gradient w.r.t. generator only.
    loss_id 1: discriminator objective, gradient w.r.t. discriminator only.
    """
    if loss_id == 0:
        fake, gcaches = net_forward(gen_params, z, arch)
        s, dcaches = net_forward(disc_params, fake, arch)
        s = s.ravel()
        n = s.size
        if nonsaturating:
            loss = float(np.mean(np.logaddexp(0.0, -s)))      # -E log D(G(z))
            ds = (_sigmoid(s) - 1.0) / n
        else:
            loss = float(np.mean(-np.logaddexp(0.0, s)))      # E log(1 - D(G(z)))
            ds = -_sigmoid(s) / n
        _, dfake = net_backward(disc_params, dcaches, ds[:, None], arch)
        grads, _ = net_backward(gen_params, gcaches, dfake, arch)
        return loss, grads
    if loss_id == 1:
        s_real, rcaches = net_forward(disc_params, real, arch)
        s_real = s_real.ravel()
        fake, _ = net_forward(gen_params, z, arch)
        s_fake, fcaches = net_forward(disc_params, fake, arch)
        s_fake = s_fake.ravel()
        loss = float(np.mean(np.logaddexp(0.0, -s_real)) + np.mean(np.logaddexp(0.0, s_fake)))
        ds_real = (_sigmoid(s_real) - 1.0) / s_real.size
        ds_fake = _sigmoid(s_fake) / s_fake.size
        grads_r, _ = net_backward(disc_params, rcaches, ds_real[:, None], arch)
        grads_f, _ = net_backward(disc_params, fcaches, ds_fake[:, None], arch)
        return loss, {k: grads_r[k] + grads_f[k] for k in grads_r}
    raise ValueError(f"unknown gan loss id {loss_id}")


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def proxy_inception_score(gen_params: Params, arch: ArchSpec, n_samples: int,
                          classifier: ProxyClassifier, rng: Rng) -> float:
    """exp(mean_x KL(p(y|x) || mean posterior)) over generated samples;
    bounded in [1, n_components]."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    z = rng.normal(0.0, 1.0, (n_samples, arch.dz))
    fake, _ = net_forward(gen_params, z, arch)
    post = np.maximum(classifier.posterior(fake), 1e-12)
    mean_post = post.mean(axis=0)
    kl = np.sum(post * (np.log(post) - np.log(mean_post)), axis=1)
    return float(np.exp(np.mean(kl)))


def disc_error_feature(gen_params: Params, disc_params: Params, arch: ArchSpec,
                       real: np.ndarray, n: int, rng: Rng) -> float:
    """Classification error of thresholding D at 0.5 on a balanced
    real/generated sample (real labeled 1, fake 0)."""
    if n < 2:
        raise ValueError("need n >= 2")
    half = n // 2
    pick = rng.integers(0, real.shape[0], half)
    z = rng.normal(0.0, 1.0, (half, arch.dz))
    fake, _ = net_forward(gen_params, z, arch)
    s_real, _ = net_forward(disc_params, real[pick], arch)
    s_fake, _ = net_forward(disc_params, fake, arch)
    wrong = np.sum(s_real.ravel() <= 0) + np.sum(s_fake.ravel() > 0)
    return float(wrong) / (2 * half)


def gan_reward(inception: float, c: float = 1.0) -> float:
    return c * inception * inception


# ---------------------------------------------------------------------------
# the task process
# ---------------------------------------------------------------------------

@dataclass
class GanTaskConfig:
    mixture_k: int = 8
    radius: float = 2.0
    comp_std: float = 0.05
    arch: ArchSpec = field(default_factory=ArchSpec)
    batch_size: int = 64
    g_lr: float = 1e-3
    d_lr: float = 1e-3
    adam_beta1: float = 0.5
    total_steps: int = 10_000
    segment_len: int = 200
    is_samples: int = 2048
    final_is_samples: int = 4096
    real_pool: int = 16_384
    nonsaturating: bool = False
    reward_c: float = 1.0
    ema_decay: float = 0.9

    def with_(self, **kw) -> "GanTaskConfig":
        return replace(self, **kw)


class GanTask(TaskProcess):
    """Action 0 updates the generator on its loss; action 1 updates the
    discriminator on the full GAN loss. Runs in fixed-segment mode."""

    episode_mode = "fixed_segments"

    def __init__(self, cfg: GanTaskConfig, rng: Rng):
        self.cfg = cfg
        self.max_steps = cfg.total_steps
        self.mixture = MixtureSpec(cfg.mixture_k, cfg.radius, cfg.comp_std)
        self.classifier = ProxyClassifier(self.mixture)
        self.action_space = ActionSpace([Action(0, 0), Action(1, 1)])
        self.gen = init_net(cfg.arch.dz, cfg.arch.width, 2, rng.split("gen"))
        self.disc = init_net(2, cfg.arch.width, 1, rng.split("disc"))
        self._g_opt = AdamState.for_params(self.gen, lr=cfg.g_lr, beta1=cfg.adam_beta1)
        self._d_opt = AdamState.for_params(self.disc, lr=cfg.d_lr, beta1=cfg.adam_beta1)
        self.real = self.mixture.sample(cfg.real_pool, rng.split("real"))
        self._batch_rng = rng.split("batches")
        self._z_rng = rng.split("noise")
        self._eval_rng = rng.split("eval")
        self._order = self._batch_rng.permutation(cfg.real_pool)
        self._cursor = 0
        self._eval_count = 0
        self.history = HistoryCache(n_losses=2, ema_decay=cfg.ema_decay)
        self.step_count = 0
        self.batches_scanned = 0
        self.is_history: list[tuple[int, float]] = []
        self._bootstrap()

    def _next_real(self) -> np.ndarray:
        b = self.cfg.batch_size
        if self._cursor + b > self.real.shape[0]:
            self._order = self._batch_rng.permutation(self.real.shape[0])
            self._cursor = 0
        idx = self._order[self._cursor:self._cursor + b]
        self._cursor += b
        return self.real[idx]

    def _next_z(self) -> np.ndarray:
        return self._z_rng.normal(0.0, 1.0, (self.cfg.batch_size, self.cfg.arch.dz))

    def _grad_norm(self, grads: Params) -> float:
        sq = sum(float(np.sum(g * g)) for g in grads.values())
        return math.sqrt(sq) / math.sqrt(sum(g.size for g in grads.values()))

    def _eval_scores(self) -> None:
        self._eval_count += 1
        er = self._eval_rng.split(f"e{self._eval_count}")
        score = proxy_inception_score(self.gen, self.cfg.arch, self.cfg.is_samples,
                                      self.classifier, er.split("is"))
        derr = disc_error_feature(self.gen, self.disc, self.cfg.arch, self.real,
                                  self.cfg.batch_size * 2, er.split("derr"))
        self.history.touch("is", score, self.step_count)
        self.history.touch("d_err", derr, self.step_count)
        self.is_history.append((self.step_count, score))

    def _bootstrap(self) -> None:
        z = self._z_rng.normal(0.0, 1.0, (self.cfg.batch_size, self.cfg.arch.dz))
        real = self.real[self._order[:self.cfg.batch_size]]
        for lid in (0, 1):
            loss, grads = gan_losses_and_grads(self.gen, self.disc, self.cfg.arch,
                                               real, z, lid, self.cfg.nonsaturating)
            self.history.touch(f"loss{lid}", loss, 0)
            self.history.touch(f"grad{lid}", self._grad_norm(grads), 0)
        self.history.touch("val", 0.0, 0)   # unused block slot for GAN features
        self._eval_scores()

    @property
    def feature_dim(self) -> int:
        return GAN_FEATURE_DIM

    def features(self) -> np.ndarray:
        return extract_gan_features(self.history, self.step_count, self.max_steps)

    def apply_action(self, action: Action) -> None:
        if action not in self.action_space:
            raise ValueError(f"invalid action {action}")
        self.step_count += 1
        z = self._next_z()
        if action.loss_id == 0:
            loss, grads = gan_losses_and_grads(self.gen, self.disc, self.cfg.arch,
                                               None, z, 0, self.cfg.nonsaturating)
            if not math.isfinite(loss):
                raise TaskDivergedError(f"non-finite generator loss at step {self.step_count}")
            adam_step(self.gen, grads, self._g_opt)
        else:
            real = self._next_real()
            loss, grads = gan_losses_and_grads(self.gen, self.disc, self.cfg.arch,
                                               real, z, 1, self.cfg.nonsaturating)
            if not math.isfinite(loss):
                raise TaskDivergedError(f"non-finite discriminator loss at step {self.step_count}")
            adam_step(self.disc, grads, self._d_opt)
            self.batches_scanned += 1
        self.history.touch(f"loss{action.loss_id}", loss, self.step_count)
        self.history.touch(f"grad{action.loss_id}", self._grad_norm(grads), self.step_count)
        if self.step_count % self.cfg.segment_len == 0:
            self._eval_scores()

    def converged(self) -> bool:
        return False

    def performance(self) -> float:
        """Latest proxy inception score, refreshed if stale."""
        if self.history.stamps.get("is") != self.step_count:
            self._eval_scores()
        return self.history.scalars["is"]

    def episode_reward(self) -> float:
        return gan_reward(self.performance(), self.cfg.reward_c)

    def parameter_groups(self) -> dict[int, Params]:
        return {0: self.gen, 1: self.disc}

    def final_metrics(self) -> dict:
        final = proxy_inception_score(self.gen, self.cfg.arch, self.cfg.final_is_samples,
                                      self.classifier, self._eval_rng.split("final"))
        return {
            "kind": "gan",
            "val_raw": final, "val_adjusted": final,
            "test_raw": final, "test_adjusted": final,
            "steps": self.step_count, "batches": self.batches_scanned,
        }
