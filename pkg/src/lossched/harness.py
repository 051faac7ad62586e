"""Experiment harness: flat dotted-key configs with stable hashes, the
five-way-split protocols, controller training and guidance, every baseline,
sweeps, transfer experiments, budget accounting, and CSV reporting.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

import numpy as np

from .baselines import (GridSearchSpec, HeuristicPicker, default_threshold_grid,
                        dense_grid_search, fixed_gan_schedule, tune_threshold,
                        CyclePicker, FineTunedPicker, FixedRatioPicker)
from .core import (ConstantPicker, PolicyPicker, SchedulePicker, UniformRandomPicker,
                   run_episode, run_guided_training, run_schedule)
from .features import GAN_FEATURE_DIM, FeatureSpec
from .gan import ArchSpec, GanTask, GanTaskConfig, sample_gan_architecture
from .multitask import MultiTaskConfig, MultiTaskTask
from .numkit import Rng
from .policy import ControllerPolicy, CriticNet, load_policy, save_policy
from .ppo import OnlineLog, PpoConfig, train_controller_online
from .reinforce import ReinforceConfig, TrainingLog, train_controller
from .supervised import (SupervisedDataset, SupervisedTask, SupervisedTaskConfig,
                         SplitSet, load_dataset, load_splits, make_splits,
                         save_dataset, save_splits, synth_classification_data,
                         synth_regression_data)

CONFIG_MAGIC = "# lossched-config v1"
METRICS_MAGIC = "# lossched-metrics v1"
TRAINLOG_MAGIC = "# lossched-trainlog v1"
SEGMENTS_MAGIC = "# lossched-segments v1"

SUPERVISED_KINDS = ("regression", "classification")


# ---------------------------------------------------------------------------
# flat configs
# ---------------------------------------------------------------------------

def default_config(kind: str = "regression") -> dict:
    cfg = {
        "task.kind": kind,
        "run.seed": 0,
        "run.trials": 10,
        # supervised tasks
        "supervised.d": 100 if kind == "classification" else 48,
        "supervised.n_samples": 84_000,
        "supervised.noise_std": 2.0,
        "supervised.batch_size": 128,
        "supervised.lr": 3e-4,
        "supervised.optimizer": "adam",
        "supervised.l1_scale": 0.3,
        "supervised.max_steps": 14000,
        "supervised.ctrl_max_steps": 3000,
        "supervised.val_every": 20,
        "supervised.patience": 40,
        "supervised.tol": 1e-4,
        "supervised.val_subsample": 2048,
        "supervised.hidden1": 32,
        "supervised.hidden2": 32,
        "supervised.reward_c": 1.0,
        "supervised.reward_form": "literal",
        "supervised.split_fractions": "0.35,0.15,0.25,0.10,0.15",
        # controller
        "controller.arch": "linear" if kind == "gan" else "mlp2",
        "controller.hidden": 32,
        "controller.lr": 1e-3,
        "controller.optimizer": "adam",
        "controller.greedy": False,
        # episode-level trainer
        "reinforce.max_episodes": 80,
        "reinforce.clip_range": 1.0,
        "reinforce.baseline_decay": 0.9,
        "reinforce.sequences_per_update": 1,
        "reinforce.plateau_window": 50,
        "reinforce.plateau_tol": 0.01,
        # online trainer
        "ppo.gamma": 0.95,
        "ppo.clip_eps": 0.2,
        "ppo.buffer_capacity": 2000,
        "ppo.minibatch": 64,
        "ppo.sync_every": 10,
        "ppo.lr": 1e-3,
        "ppo.updates_per_segment": 4,
        "ppo.lookback": 3,
        "ppo.reward_scale": 1.0,
        "ppo.eps_den": 1e-6,
        "ppo.reward_clip": 5.0,
        # GAN task
        "gan.mixture_k": 8,
        "gan.radius": 2.0,
        "gan.comp_std": 0.05,
        "gan.width": 32,
        "gan.dz": 4,
        "gan.activation": "lrelu",
        "gan.batchnorm": False,
        "gan.batch_size": 64,
        "gan.g_lr": 1e-3,
        "gan.d_lr": 1e-3,
        "gan.adam_beta1": 0.5,
        "gan.total_steps": 10_000,
        "gan.segment_len": 200,
        "gan.is_samples": 2048,
        "gan.final_is_samples": 4096,
        "gan.real_pool": 16_384,
        "gan.nonsaturating": False,
        "gan.reward_c": 1.0,
        # multi-task surrogate
        "multitask.d": 24,
        "multitask.h": 8,
        "multitask.sizes": "2000,6000,6000",
        "multitask.noise_std": 0.1,
        "multitask.batch_size": 32,
        "multitask.lr": 1e-3,
        "multitask.optimizer": "adam",
        "multitask.total_steps": 6000,
        "multitask.segment_len": 100,
        "multitask.val_every": 20,
        # features
        "features.ablate": "none",
        # dense grid search and heuristic-threshold grids
        "grid.lo": 1e-4,
        "grid.hi": 10.0,
        "grid.size": 50,
        "grid.scale": "log",
        "th.lo": 1e-3,
        "th.hi": 10.0,
        "th.size": 10,
        # baseline details
        "baseline.gan_ks": "1,3,5",
        "baseline.finetune_frac": 0.7,
        # transfer experiments
        "transfer.n_archs": 20,
        "transfer.fail_is": 2.5,
        "transfer.dims": "100,80,120",
    }
    return cfg


def _coerce(key: str, raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("true", "1", "yes", "on"):
            return True
        if raw.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"config {key}: {raw!r} is not a boolean")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str, kind_hint: str | None = None) -> dict:
    """Parse 'dotted.key = value' lines against the defaults for the file's
    task kind; unknown keys are errors."""
    pairs = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"config line without '=': {line!r}")
        key, _, value = line.partition("=")
        pairs[key.strip()] = value.strip()
    kind = pairs.get("task.kind", kind_hint or "regression")
    cfg = default_config(kind)
    for key, raw in pairs.items():
        if key not in cfg:
            raise ValueError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, raw, cfg[key])
    validate_config(cfg)
    return cfg


def load_config(path) -> dict:
    return parse_config_text(Path(path).read_text())


def config_text(cfg: dict) -> str:
    lines = [CONFIG_MAGIC]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = f"{value:.17g}"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(config_text(cfg).encode()).hexdigest()[:12]


def validate_config(cfg: dict) -> None:
    fracs = parse_floats(cfg["supervised.split_fractions"])
    if len(fracs) != 5:
        raise ValueError("supervised.split_fractions needs 5 entries")
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ValueError(f"split fractions sum to {sum(fracs)}, not 1")
    if cfg["task.kind"] == "classification" and cfg["supervised.d"] < 40:
        raise ValueError("classification requires supervised.d >= 40")
    if cfg["features.ablate"] not in ("none", "progress", "grad_norms",
                                      "loss_values", "validation"):
        raise ValueError(f"unknown feature to ablate: {cfg['features.ablate']!r}")
    if cfg["run.trials"] < 1:
        raise ValueError("run.trials must be >= 1")


def parse_floats(text: str) -> tuple:
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def parse_ints(text: str) -> tuple:
    return tuple(int(t) for t in str(text).split(",") if t.strip())


# ---------------------------------------------------------------------------
# typed-config builders
# ---------------------------------------------------------------------------

def build_supervised_config(cfg: dict) -> SupervisedTaskConfig:
    return SupervisedTaskConfig(
        kind=cfg["task.kind"] if cfg["task.kind"] in SUPERVISED_KINDS else "regression",
        d=cfg["supervised.d"],
        n_samples=cfg["supervised.n_samples"],
        noise_std=cfg["supervised.noise_std"],
        batch_size=cfg["supervised.batch_size"],
        lr=cfg["supervised.lr"],
        optimizer=cfg["supervised.optimizer"],
        l1_scale=cfg["supervised.l1_scale"],
        max_steps=cfg["supervised.max_steps"],
        val_every=cfg["supervised.val_every"],
        patience=cfg["supervised.patience"],
        tol=cfg["supervised.tol"],
        val_subsample=cfg["supervised.val_subsample"],
        mlp_hidden=(cfg["supervised.hidden1"], cfg["supervised.hidden2"]),
        reward_c=cfg["supervised.reward_c"],
        reward_form=cfg["supervised.reward_form"],
        split_fractions=parse_floats(cfg["supervised.split_fractions"]),
    )


def build_gan_config(cfg: dict, arch: ArchSpec | None = None) -> GanTaskConfig:
    arch = arch or ArchSpec(width=cfg["gan.width"], dz=cfg["gan.dz"],
                            activation=cfg["gan.activation"],
                            batchnorm=cfg["gan.batchnorm"])
    return GanTaskConfig(
        mixture_k=cfg["gan.mixture_k"], radius=cfg["gan.radius"],
        comp_std=cfg["gan.comp_std"], arch=arch,
        batch_size=cfg["gan.batch_size"], g_lr=cfg["gan.g_lr"],
        d_lr=cfg["gan.d_lr"], adam_beta1=cfg["gan.adam_beta1"],
        total_steps=cfg["gan.total_steps"], segment_len=cfg["gan.segment_len"],
        is_samples=cfg["gan.is_samples"], final_is_samples=cfg["gan.final_is_samples"],
        real_pool=cfg["gan.real_pool"], nonsaturating=cfg["gan.nonsaturating"],
        reward_c=cfg["gan.reward_c"],
    )


def build_multitask_config(cfg: dict) -> MultiTaskConfig:
    return MultiTaskConfig(
        d=cfg["multitask.d"], h=cfg["multitask.h"],
        sizes=parse_ints(cfg["multitask.sizes"]),
        noise_std=cfg["multitask.noise_std"],
        batch_size=cfg["multitask.batch_size"], lr=cfg["multitask.lr"],
        optimizer=cfg["multitask.optimizer"],
        total_steps=cfg["multitask.total_steps"],
        segment_len=cfg["multitask.segment_len"],
        val_every=cfg["multitask.val_every"],
    )


def build_reinforce_config(cfg: dict, max_batches: int | None = None) -> ReinforceConfig:
    return ReinforceConfig(
        sequences_per_update=cfg["reinforce.sequences_per_update"],
        clip_range=cfg["reinforce.clip_range"],
        baseline_decay=cfg["reinforce.baseline_decay"],
        lr=cfg["controller.lr"],
        optimizer=cfg["controller.optimizer"],
        max_episodes=cfg["reinforce.max_episodes"],
        plateau_window=cfg["reinforce.plateau_window"],
        plateau_tol=cfg["reinforce.plateau_tol"],
        max_batches=max_batches,
    )


def build_ppo_config(cfg: dict, segment_len: int) -> PpoConfig:
    return PpoConfig(
        hidden=cfg["controller.hidden"],
        gamma=cfg["ppo.gamma"], clip_eps=cfg["ppo.clip_eps"],
        buffer_capacity=cfg["ppo.buffer_capacity"], minibatch=cfg["ppo.minibatch"],
        sync_every=cfg["ppo.sync_every"], lr=cfg["ppo.lr"],
        updates_per_segment=cfg["ppo.updates_per_segment"],
        segment_len=segment_len, lookback=cfg["ppo.lookback"],
        reward_scale=cfg["ppo.reward_scale"], eps_den=cfg["ppo.eps_den"],
        reward_clip=cfg["ppo.reward_clip"],
    )


def build_feature_spec(cfg: dict, n_losses: int) -> FeatureSpec:
    spec = FeatureSpec(n_losses=n_losses)
    if cfg["features.ablate"] != "none":
        spec = spec.ablate(cfg["features.ablate"])
    return spec


def make_controller(cfg: dict, in_dim: int, out_dim: int, rng: Rng) -> ControllerPolicy:
    return ControllerPolicy(cfg["controller.arch"], in_dim, out_dim,
                            hidden=cfg["controller.hidden"], rng=rng)


# ---------------------------------------------------------------------------
# metric rows and CSV files
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("run_id", "method", "variant", "trial", "kind", "config_hash",
                  "seed", "val_raw", "val_adjusted", "test_raw", "test_adjusted",
                  "steps", "batches")


def metric_row(cfg: dict, method: str, trial: int, metrics: dict,
               variant: str = "-") -> dict:
    h = config_hash(cfg)
    return {
        "run_id": f"{method}-{variant}-{trial}-{h}",
        "method": method, "variant": variant, "trial": trial,
        "kind": metrics["kind"], "config_hash": h, "seed": cfg["run.seed"],
        "val_raw": metrics["val_raw"], "val_adjusted": metrics["val_adjusted"],
        "test_raw": metrics["test_raw"], "test_adjusted": metrics["test_adjusted"],
        "steps": metrics["steps"], "batches": metrics["batches"],
    }


def _csv_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.17g}"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, rows: list[dict], magic: str, columns=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    lines = [magic, ",".join(columns)]
    for row in rows:
        lines.append(",".join(_csv_cell(row.get(c, "")) for c in columns))
    path.write_text("\n".join(lines) + "\n")


def read_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        return []
    columns = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {}
        for col, cell in zip(columns, cells):
            try:
                row[col] = int(cell)
            except ValueError:
                try:
                    row[col] = float(cell)
                except ValueError:
                    row[col] = cell
        rows.append(row)
    return rows


def write_metrics(path, rows: list[dict]) -> None:
    write_csv(path, rows, METRICS_MAGIC, METRIC_COLUMNS)


def training_log_rows(log: TrainingLog) -> list[dict]:
    return [r.as_dict() for r in log.rows]


def segment_log_rows(log: OnlineLog) -> list[dict]:
    return [r.as_dict() for r in log.segments]


# ---------------------------------------------------------------------------
# trial-level protocol runners
# ---------------------------------------------------------------------------

def trial_rng(cfg: dict, trial: int) -> Rng:
    return Rng(cfg["run.seed"]).split(f"trial{trial}")


def synth_trial_dataset(cfg: dict, trial: int) -> tuple[SupervisedDataset, SplitSet]:
    rng = trial_rng(cfg, trial)
    kind = cfg["task.kind"]
    if kind == "regression":
        ds = synth_regression_data(cfg["supervised.d"], cfg["supervised.n_samples"],
                                   cfg["supervised.noise_std"], rng.split("data"))
    elif kind == "classification":
        ds = synth_classification_data(cfg["supervised.d"], cfg["supervised.n_samples"],
                                       rng.split("data"))
    else:
        raise ValueError(f"no dataset synthesis for task kind {kind!r}")
    splits = make_splits(ds.n_samples, parse_floats(cfg["supervised.split_fractions"]),
                         rng.split("splits"))
    return ds, splits


def train_supervised_controller(cfg: dict, dataset: SupervisedDataset,
                                splits: SplitSet, trial: int,
                                max_batches: int | None = None,
                                l1_scale: float | None = None
                                ) -> tuple[ControllerPolicy, TrainingLog]:
    scfg = build_supervised_config(cfg).with_(max_steps=cfg["supervised.ctrl_max_steps"])
    if l1_scale is not None:
        scfg = scfg.with_(l1_scale=l1_scale)
    fspec = build_feature_spec(cfg, n_losses=2)
    rng = trial_rng(cfg, trial).split("ctrl")
    policy = make_controller(cfg, fspec.dim, 2, rng.split("init"))

    def factory(task_rng):
        return SupervisedTask(dataset, splits, scfg, "controller", task_rng, fspec)

    rcfg = build_reinforce_config(cfg, max_batches=max_batches)
    log = train_controller(factory, policy, rcfg, rng.split("train"))
    return policy, log


def guide_supervised(cfg: dict, dataset: SupervisedDataset, splits: SplitSet,
                     policy: ControllerPolicy, trial: int,
                     l1_scale: float | None = None, label: str = "guide") -> dict:
    scfg = build_supervised_config(cfg)
    if l1_scale is not None:
        scfg = scfg.with_(l1_scale=l1_scale)
    fspec = build_feature_spec(cfg, n_losses=2)
    if policy.in_dim != fspec.dim:
        raise ValueError(f"controller input dim {policy.in_dim} != feature dim {fspec.dim}")
    if policy.out_dim != 2:
        raise ValueError(f"controller output dim {policy.out_dim} != 2 actions")
    rng = trial_rng(cfg, trial).split(label)
    task = SupervisedTask(dataset, splits, scfg, "guided", rng.split("task"), fspec)
    return run_guided_training(task, policy, rng.split("decisions"),
                               greedy=cfg["controller.greedy"])


def run_supervised_baseline(cfg: dict, name: str, dataset: SupervisedDataset,
                            splits: SplitSet, trial: int) -> tuple[dict, list]:
    """Returns (metrics, extra table). Names: wol1, uniform, s1..s3 (threshold
    tuned per trial), dgs."""
    scfg = build_supervised_config(cfg)
    fspec = build_feature_spec(cfg, n_losses=2)
    rng = trial_rng(cfg, trial).split(f"baseline-{name}")
    if name == "wol1":
        task = SupervisedTask(dataset, splits, scfg, "union", rng.split("task"), fspec)
        return run_schedule(task, ConstantPicker(0), rng.split("run")), []
    if name == "uniform":
        task = SupervisedTask(dataset, splits, scfg, "guided", rng.split("task"), fspec)
        return run_schedule(task, UniformRandomPicker(), rng.split("run")), []
    if name in ("s1", "s2", "s3"):
        grid = default_threshold_grid(cfg["th.lo"], cfg["th.hi"], cfg["th.size"])

        def factory(r):
            return SupervisedTask(dataset, splits, scfg, "guided", r, fspec)

        best_th, metrics, table = tune_threshold(name, grid, factory, rng)
        rows = [dict(threshold=th, **{f"m_{k}": v for k, v in m.items()})
                for th, m in table]
        return metrics, rows
    if name == "dgs":
        spec = GridSearchSpec(cfg["grid.lo"], cfg["grid.hi"], cfg["grid.size"],
                              cfg["grid.scale"])
        best_lam, metrics, table = dense_grid_search(spec, dataset, splits, scfg, rng)
        rows = [dict(lam=lam, **{f"m_{k}": v for k, v in m.items()})
                for lam, m in table]
        return metrics, rows
    raise ValueError(f"unknown supervised baseline {name!r}")


def gan_schedule_picker(name: str, cfg: dict) -> SchedulePicker:
    """'1:1', '1:K' (generator-heavy), 'K:1' (discriminator-heavy)."""
    d_part, g_part = name.split(":")
    d_steps, g_steps = int(d_part), int(g_part)
    if d_steps == 1:
        return fixed_gan_schedule(g_steps, "g_heavy")
    if g_steps == 1:
        return fixed_gan_schedule(d_steps, "d_heavy")
    raise ValueError(f"unsupported GAN ratio {name!r}")


def gan_fixed_run(cfg: dict, ratio: str, trial: int,
                  arch: ArchSpec | None = None) -> tuple[dict, GanTask]:
    gcfg = build_gan_config(cfg, arch)
    rng = trial_rng(cfg, trial)
    task = GanTask(gcfg, rng.split("task"))
    picker = gan_schedule_picker(ratio, cfg)
    run_schedule(task, picker, rng.split(f"fixed-{ratio}"))
    return task.final_metrics(), task


def gan_autoloss_run(cfg: dict, trial: int, arch: ArchSpec | None = None
                     ) -> tuple[dict, ControllerPolicy, OnlineLog, GanTask]:
    gcfg = build_gan_config(cfg, arch)
    rng = trial_rng(cfg, trial)
    task = GanTask(gcfg, rng.split("task"))
    actor = make_controller(cfg, GAN_FEATURE_DIM, 2, rng.split("actor"))
    critic = CriticNet(GAN_FEATURE_DIM, cfg["controller.hidden"], rng.split("critic"))
    pcfg = build_ppo_config(cfg, gcfg.segment_len)
    log = train_controller_online(task, actor, critic, pcfg, rng.split("ppo"))
    return task.final_metrics(), actor, log, task


def gan_guided_run(cfg: dict, policy: ControllerPolicy, trial: int,
                   arch: ArchSpec | None = None, label: str = "guided"
                   ) -> tuple[dict, GanTask]:
    gcfg = build_gan_config(cfg, arch)
    rng = trial_rng(cfg, trial)
    task = GanTask(gcfg, rng.split("task"))
    if policy.in_dim != task.feature_dim:
        raise ValueError("controller/feature dimension mismatch")
    run_schedule(task, PolicyPicker(policy, greedy=cfg["controller.greedy"]),
                 rng.split(label))
    return task.final_metrics(), task


def multitask_picker(name: str, cfg: dict) -> SchedulePicker:
    sizes = parse_ints(cfg["multitask.sizes"])
    if name == "fixedratio":
        return FixedRatioPicker(sizes)
    if name == "finetuned":
        switch = int(cfg["baseline.finetune_frac"] * cfg["multitask.total_steps"])
        return FineTunedPicker(sizes, switch, target=0)
    if name == "mtonly":
        return ConstantPicker(0)
    if name == "uniform":
        return UniformRandomPicker()
    raise ValueError(f"unknown multitask baseline {name!r}")


def multitask_fixed_run(cfg: dict, name: str, trial: int) -> tuple[dict, MultiTaskTask]:
    mcfg = build_multitask_config(cfg)
    rng = trial_rng(cfg, trial)
    task = MultiTaskTask(mcfg, rng.split("task"))
    run_schedule(task, multitask_picker(name, cfg), rng.split(f"fixed-{name}"))
    return task.final_metrics(), task


def multitask_autoloss_run(cfg: dict, trial: int
                           ) -> tuple[dict, ControllerPolicy, OnlineLog, MultiTaskTask]:
    mcfg = build_multitask_config(cfg)
    rng = trial_rng(cfg, trial)
    task = MultiTaskTask(mcfg, rng.split("task"))
    actor = make_controller(cfg, task.feature_dim, 3, rng.split("actor"))
    critic = CriticNet(task.feature_dim, cfg["controller.hidden"], rng.split("critic"))
    pcfg = build_ppo_config(cfg, mcfg.segment_len)
    log = train_controller_online(task, actor, critic, pcfg, rng.split("ppo"))
    return task.final_metrics(), actor, log, task


# ---------------------------------------------------------------------------
# transfer experiments
# ---------------------------------------------------------------------------

def transfer_dataset(cfg: dict, which: int, trial: int = 0
                     ) -> tuple[SupervisedDataset, SplitSet]:
    """Variant dataset #which (0-based): different dimensionality and a
    disjoint generation stream."""
    dims = parse_ints(cfg["transfer.dims"])
    d = dims[which % len(dims)]
    rng = Rng(cfg["run.seed"]).split(f"transfer-ds{which}").split(f"trial{trial}")
    ds = synth_classification_data(d, cfg["supervised.n_samples"], rng.split("data"))
    splits = make_splits(ds.n_samples, parse_floats(cfg["supervised.split_fractions"]),
                         rng.split("splits"))
    return ds, splits


def transfer_model_pairs(cfg: dict, policy: ControllerPolicy) -> list[dict]:
    """Paired guided-vs-1:1 runs on sampled architectures; both arms share
    the task stream (identical init and data)."""
    arch_rng = Rng(cfg["run.seed"]).split("transfer-arch")
    pairs = []
    for a in range(cfg["transfer.n_archs"]):
        arch = sample_gan_architecture(arch_rng.split(f"a{a}"))
        sub = dict(cfg)
        sub["run.seed"] = cfg["run.seed"] + 1000 + a
        guided, _ = gan_guided_run(sub, policy, trial=0, arch=arch)
        fixed, _ = gan_fixed_run(sub, "1:1", trial=0, arch=arch)
        pairs.append({
            "arch": arch.describe(),
            "guided_is": guided["test_raw"],
            "fixed_is": fixed["test_raw"],
            "failed": (guided["test_raw"] < cfg["transfer.fail_is"]
                       and fixed["test_raw"] < cfg["transfer.fail_is"]),
        })
    return pairs


# ---------------------------------------------------------------------------
# commands (file-producing entry points)
# ---------------------------------------------------------------------------

def _prepare_out(out_dir, cfg: dict, force: bool) -> Path:
    out = Path(out_dir)
    echo = out / "config.echo.txt"
    if echo.exists() and not force:
        raise FileExistsError(f"{echo} exists (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    echo.write_text(config_text(cfg))
    return out


def _write_runinfo(out: Path, started: float, extra: dict | None = None) -> None:
    info = {"wall_clock_s": time.time() - started}
    info.update(extra or {})
    (out / "runinfo.json").write_text(json.dumps(info, indent=2) + "\n")


def cmd_synth(cfg: dict, out_dir, force: bool = False) -> Path:
    if cfg["task.kind"] not in SUPERVISED_KINDS:
        raise ValueError("synth applies to supervised task kinds only")
    started = time.time()
    out = _prepare_out(out_dir, cfg, force)
    for trial in range(cfg["run.trials"]):
        tdir = out / f"trial{trial:02d}"
        tdir.mkdir(exist_ok=True)
        ds, splits = synth_trial_dataset(cfg, trial)
        save_dataset(ds, tdir / "dataset.txt")
        save_splits(splits, tdir / "splits.txt")
    _write_runinfo(out, started)
    return out


def _load_trial_data(data_dir, trial: int) -> tuple[SupervisedDataset, SplitSet]:
    tdir = Path(data_dir) / f"trial{trial:02d}"
    if not (tdir / "dataset.txt").exists():
        raise FileNotFoundError(f"missing dataset under {tdir} (run synth first)")
    return load_dataset(tdir / "dataset.txt"), load_splits(tdir / "splits.txt")


def cmd_train_controller(cfg: dict, out_dir, data_dir=None, force: bool = False,
                         budget: int | None = None) -> Path:
    started = time.time()
    out = _prepare_out(out_dir, cfg, force)
    kind = cfg["task.kind"]
    for trial in range(cfg["run.trials"]):
        tdir = out / f"trial{trial:02d}"
        tdir.mkdir(exist_ok=True)
        if kind in SUPERVISED_KINDS:
            ds, splits = _load_trial_data(data_dir or out_dir, trial)
            policy, log = train_supervised_controller(cfg, ds, splits, trial,
                                                      max_batches=budget)
            save_policy(policy, tdir / "controller.ckpt")
            write_csv(tdir / "training_log.csv", training_log_rows(log), TRAINLOG_MAGIC)
            if budget is not None and log.episodes_run == 0:
                print(f"warning: trial {trial}: budget below one episode; "
                      "checkpoint saved without any update")
        elif kind == "gan":
            metrics, actor, log, _ = gan_autoloss_run(cfg, trial)
            save_policy(actor, tdir / "controller.ckpt")
            write_csv(tdir / "segments.csv", segment_log_rows(log), SEGMENTS_MAGIC)
            write_metrics(tdir / "metrics.csv",
                          [metric_row(cfg, "gan_autoloss", trial, metrics)])
        elif kind == "multitask":
            metrics, actor, log, _ = multitask_autoloss_run(cfg, trial)
            save_policy(actor, tdir / "controller.ckpt")
            write_csv(tdir / "segments.csv", segment_log_rows(log), SEGMENTS_MAGIC)
            write_metrics(tdir / "metrics.csv",
                          [metric_row(cfg, "mt_autoloss", trial, metrics)])
        else:
            raise ValueError(f"unknown task kind {kind!r}")
    _write_runinfo(out, started)
    return out


def _resolve_ckpt(ckpt, trial: int):
    """A checkpoint may be a single file (shared by all trials) or a
    directory of trial subdirectories."""
    p = Path(ckpt)
    if p.is_dir():
        p = p / f"trial{trial:02d}" / "controller.ckpt"
    return load_policy(p)


def cmd_guide(cfg: dict, out_dir, ckpt, data_dir, force: bool = False,
              lambda_sweep: tuple | None = None, sweep_mode: str = "retrain") -> Path:
    started = time.time()
    out = _prepare_out(out_dir, cfg, force)
    rows = []
    for trial in range(cfg["run.trials"]):
        ds, splits = _load_trial_data(data_dir, trial)
        if lambda_sweep:
            for lam in lambda_sweep:
                if sweep_mode == "retrain":
                    policy, _ = train_supervised_controller(cfg, ds, splits, trial,
                                                            l1_scale=lam)
                else:
                    policy = _resolve_ckpt(ckpt, trial)
                metrics = guide_supervised(cfg, ds, splits, policy, trial,
                                           l1_scale=lam, label=f"guide-lam{lam}")
                rows.append(metric_row(cfg, "autoloss", trial, metrics,
                                       variant=f"lambda={lam:g}"))
        else:
            policy = _resolve_ckpt(ckpt, trial)
            variant = ("-" if cfg["features.ablate"] == "none"
                       else f"ablate:{cfg['features.ablate']}")
            metrics = guide_supervised(cfg, ds, splits, policy, trial)
            rows.append(metric_row(cfg, "autoloss", trial, metrics, variant=variant))
    write_metrics(out / "metrics.csv", rows)
    _write_runinfo(out, started)
    return out


def cmd_baseline(cfg: dict, out_dir, name: str, data_dir=None,
                 force: bool = False) -> Path:
    started = time.time()
    out = _prepare_out(out_dir, cfg, force)
    rows = []
    extra_rows = []
    kind = cfg["task.kind"]
    for trial in range(cfg["run.trials"]):
        if kind in SUPERVISED_KINDS:
            ds, splits = _load_trial_data(data_dir, trial)
            metrics, table = run_supervised_baseline(cfg, name, ds, splits, trial)
            rows.append(metric_row(cfg, name, trial, metrics))
            for r in table:
                extra_rows.append(dict(trial=trial, **r))
        elif kind == "gan":
            if name == "grid":
                ratios = ["1:1"]
                for k in parse_ints(cfg["baseline.gan_ks"]):
                    if k > 1:
                        ratios += [f"1:{k}", f"{k}:1"]
                for ratio in ratios:
                    metrics, task = gan_fixed_run(cfg, ratio, trial)
                    rows.append(metric_row(cfg, f"gan_{ratio}", trial, metrics))
                    for step, score in task.is_history:
                        extra_rows.append({"trial": trial, "method": f"gan_{ratio}",
                                           "step": step, "is": score})
            else:
                metrics, task = gan_fixed_run(cfg, name, trial)
                rows.append(metric_row(cfg, f"gan_{name}", trial, metrics))
                for step, score in task.is_history:
                    extra_rows.append({"trial": trial, "method": f"gan_{name}",
                                       "step": step, "is": score})
        elif kind == "multitask":
            metrics, _ = multitask_fixed_run(cfg, name, trial)
            rows.append(metric_row(cfg, name, trial, metrics))
        else:
            raise ValueError(f"unknown task kind {kind!r}")
    write_metrics(out / "metrics.csv", rows)
    if extra_rows:
        write_csv(out / "table.csv", extra_rows, "# lossched-table v1")
    _write_runinfo(out, started)
    return out


def cmd_transfer(cfg: dict, out_dir, ckpt, mode: str, force: bool = False) -> Path:
    started = time.time()
    out = _prepare_out(out_dir, cfg, force)
    rows = []
    if mode in ("data", "both"):
        policy = _resolve_ckpt(ckpt, 0)
        dims = parse_ints(cfg["transfer.dims"])
        for which in range(1, len(dims)):
            for trial in range(cfg["run.trials"]):
                ds, splits = transfer_dataset(cfg, which, trial)
                metrics = guide_supervised(cfg, ds, splits, policy, trial,
                                           label=f"transfer-ds{which}")
                rows.append(metric_row(cfg, "autoloss", trial, metrics,
                                       variant=f"dataset={which}"))
    if mode in ("model", "both"):
        policy = _resolve_ckpt(ckpt, 0)
        pairs = transfer_model_pairs(cfg, policy)
        write_csv(out / "model_pairs.csv", pairs, "# lossched-table v1")
        kept = [p for p in pairs if not p["failed"]]
        wins = sum(1 for p in kept if p["guided_is"] > p["fixed_is"])
        (out / "model_summary.json").write_text(json.dumps({
            "n_archs": len(pairs), "excluded_failures": len(pairs) - len(kept),
            "guided_wins": wins, "comparable": len(kept),
        }, indent=2) + "\n")
    if rows:
        write_metrics(out / "metrics.csv", rows)
    _write_runinfo(out, started)
    return out


def aggregate_metrics(rows: list[dict]) -> list[dict]:
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        key = (row["kind"], row["method"], row.get("variant", "-"))
        groups.setdefault(key, []).append(row)
    summary = []
    for (kind, method, variant), grp in sorted(groups.items()):
        adj = np.array([float(r["test_adjusted"]) for r in grp])
        raw = np.array([float(r["test_raw"]) for r in grp])
        batches = np.array([float(r["batches"]) for r in grp])
        summary.append({
            "kind": kind, "method": method, "variant": variant, "n": len(grp),
            "test_adjusted_mean": float(adj.mean()),
            "test_adjusted_std": float(adj.std(ddof=0)),
            "test_raw_mean": float(raw.mean()),
            "test_raw_std": float(raw.std(ddof=0)),
            "batches_total": float(batches.sum()),
        })
    return summary


def cmd_report(run_dir, out_path=None) -> list[dict]:
    run_dir = Path(run_dir)
    rows = []
    for path in sorted(run_dir.rglob("metrics.csv")):
        rows.extend(read_csv(path))
    summary = aggregate_metrics(rows)
    out_path = Path(out_path) if out_path else run_dir / "summary.csv"
    columns = ["kind", "method", "variant", "n", "test_adjusted_mean",
               "test_adjusted_std", "test_raw_mean", "test_raw_std", "batches_total"]
    write_csv(out_path, summary, "# lossched-summary v1", columns)
    return summary
