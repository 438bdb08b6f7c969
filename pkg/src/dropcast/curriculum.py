"""Three-stage training: MAE pre-training, fair-CRPS fine-tuning, deep ensembling.

Every source of randomness in a run is a pure function of ``(seed, step)``:
the batch order comes from a permutation keyed by ``(seed, epoch)`` and each
row's dropout stream from ``(seed, stage, step, row, member)``. A checkpoint
therefore only needs weights, optimizer moments and the step counter to
resume a run exactly.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import statistics
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import backbone
from .backbone import ModelConfig, UNet, stream_key
from .grid import AreaWeights, GridSpec, area_weights
from .objectives import fair_crps, weighted_mae
from .optimizers import HybridMuonAdamW, OptimConfig, ema_update, stage1_config, stage2_config
from .rollout import autoregress
from .toyatmos import ForcingSpec, NormStats, Trajectory, WindowSet, fit_norm_stats, make_windows, split_bounds

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
STAGES = ("stage1", "stage2", "scratch")
_STAGE_SALT = {"stage1": 1, "stage2": 2, "scratch": 3, "val": 99}


class TrainingDiverged(FloatingPointError):
    """Raised on a non-finite loss; ``last_good`` holds the latest finite checkpoint."""

    def __init__(self, message: str, last_good: Checkpoint | None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class TrainingPlan:
    stage1_epochs: int = 100
    stage2_epochs: int = 8
    batch_size: int = 48
    train_ensemble_size: int = 2
    deep_ensemble_size: int = 4
    stage1_optim: OptimConfig = field(default_factory=stage1_config)
    stage2_optim: OptimConfig = field(default_factory=stage2_config)
    seeds: tuple[int, ...] = (0, 1, 2, 3)
    from_scratch_crps: bool = False
    # desk-scale knobs: epochs can be capped to a fixed number of steps, and
    # validation can run more often than once per epoch
    steps_per_epoch: int | None = None
    eval_every: int | None = None
    val_leads: tuple[int, ...] = (1, 2, 4)
    val_members: int = 4
    val_inits: int = 16
    spike_factor: float = 10.0
    spike_window: int = 50

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "val_leads", tuple(int(v) for v in self.val_leads))
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.deep_ensemble_size < 1:
            raise ValueError("deep_ensemble_size (K) must be >= 1")
        if len(self.seeds) < self.deep_ensemble_size:
            raise ValueError(f"need at least K={self.deep_ensemble_size} seeds, got {len(self.seeds)}")
        if self.val_members < 2:
            raise ValueError("val_members must be >= 2 for CRPS validation")
        if not self.val_leads or min(self.val_leads) < 1:
            raise ValueError("val_leads must be positive")

    def epoch_steps(self, n_train: int) -> int:
        full = math.ceil(n_train / self.batch_size)
        return full if self.steps_per_epoch is None else min(full, self.steps_per_epoch)

    def stage_steps(self, stage: str, n_train: int) -> int:
        epochs = self.stage1_epochs if stage == "stage1" else self.stage2_epochs
        return epochs * self.epoch_steps(n_train)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["stage1_optim"] = self.stage1_optim.to_dict()
        d["stage2_optim"] = self.stage2_optim.to_dict()
        d["seeds"] = list(self.seeds)
        d["val_leads"] = list(self.val_leads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainingPlan:
        d = dict(d)
        d["stage1_optim"] = OptimConfig.from_dict(d["stage1_optim"])
        d["stage2_optim"] = OptimConfig.from_dict(d["stage2_optim"])
        return cls(**d)


def stage2_compute_fraction(plan: TrainingPlan, n_train: int | None = None) -> float:
    """Share of all forward passes spent in Stage 2 (M passes per sample there)."""
    spe = plan.epoch_steps(n_train) if n_train is not None else 1
    s1 = plan.stage1_epochs * spe
    s2 = plan.stage2_epochs * spe * plan.train_ensemble_size
    if s1 + s2 == 0:
        return 0.0
    return s2 / (s1 + s2)


# --- data ---------------------------------------------------------------------------


@dataclass
class ToyDataset:
    grid: GridSpec
    stats: NormStats
    forcing: ForcingSpec
    channel_names: tuple[str, ...]
    train: WindowSet
    val: WindowSet
    test: WindowSet
    weights: AreaWeights

    @classmethod
    def from_trajectory(cls, trajectory: Trajectory, forcing: ForcingSpec | None = None,
                        fractions=(0.8, 0.1, 0.1)) -> ToyDataset:
        forcing = forcing or ForcingSpec()
        bounds = split_bounds(len(trajectory), fractions)
        lo, hi = bounds["train"]
        stats = fit_norm_stats(trajectory[lo:hi])
        splits = {k: make_windows(trajectory, stats, forcing=forcing, bounds=b) for k, b in bounds.items()}
        return cls(trajectory.grid, stats, forcing, trajectory.channel_names, splits["train"], splits["val"],
                   splits["test"], area_weights(trajectory.grid))

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)


def batch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch, 0xDA7A]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int, steps_per_epoch: int) -> np.ndarray:
    epoch, pos = divmod(step, steps_per_epoch)
    perm = batch_order(seed, epoch, n)
    idx = perm[pos * batch_size:(pos + 1) * batch_size]
    if len(idx) == 0:
        raise ValueError("empty batch: steps_per_epoch exceeds the data")
    return idx


def train_keys(seed: int, stage: str, step: int, batch: int, members: int) -> list[int]:
    """One dropout stream per (member, row), member-major to match the stacked batch."""
    s = _STAGE_SALT[stage]
    return [stream_key(seed, s, step, b, m) for m in range(members) for b in range(batch)]


# --- checkpoints --------------------------------------------------------------------


@dataclass
class Checkpoint:
    model_config: ModelConfig
    grid: GridSpec
    norm_stats: NormStats
    forcing: ForcingSpec
    channel_names: tuple[str, ...]
    stage: str
    global_step: int
    weights: dict[str, torch.Tensor]
    ema_weights: dict[str, torch.Tensor]
    optimizer_state: dict[str, torch.Tensor] = field(default_factory=dict)
    optimizer_step: int = 0
    plan: TrainingPlan | None = None
    seed: int = 0
    history: list[dict] = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage tag must be one of {STAGES}, got {self.stage!r}")

    def model(self, use_ema: bool = False) -> UNet:
        m = backbone.build(self.model_config, self.grid, seed=None)
        m.load_state_dict(self.ema_weights if use_ema else self.weights)
        return m

    def inference_model(self, use_ema: bool = True) -> UNet:
        return self.model(use_ema=use_ema)

    @property
    def rng_state(self) -> dict:
        return {"seed": self.seed, "step": self.global_step}

    def metric(self, key: str) -> list[tuple[int, float]]:
        return [(h["step"], h[key]) for h in self.history if key in h]


def _clone(sd) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in sd.items()}


def _dtype_code(t: torch.Tensor) -> str:
    if t.dtype == torch.float64:
        return "<f8"
    if t.dtype == torch.float32:
        return "<f4"
    if t.dtype == torch.int64:
        return "<i8"
    raise TypeError(f"unsupported checkpoint dtype {t.dtype}")


def _save_arrays(arrays: dict[str, torch.Tensor], directory: Path, prefix: str) -> list[dict]:
    entries = []
    for i, (name, t) in enumerate(arrays.items()):
        fname = f"{prefix}_{i:04d}.bin"
        code = _dtype_code(t)
        np.ascontiguousarray(t.detach().cpu().numpy(), dtype=code).tofile(directory / fname)
        entries.append({"name": name, "file": fname, "dtype": code, "shape": list(t.shape)})
    return entries


def _load_arrays(entries: list[dict], directory: Path) -> dict[str, torch.Tensor]:
    out = {}
    for e in entries:
        a = np.fromfile(directory / e["file"], dtype=e["dtype"]).reshape(e["shape"])
        out[e["name"]] = torch.from_numpy(a.astype(a.dtype.newbyteorder("=")))
    return out


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    arrays = path / "arrays"
    arrays.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "stage": ckpt.stage,
        "global_step": ckpt.global_step,
        "seed": ckpt.seed,
        "rng_state": ckpt.rng_state,
        "model_config": ckpt.model_config.to_dict(),
        "grid": ckpt.grid.to_dict(),
        "norm_stats": ckpt.norm_stats.to_dict(),
        "forcing": ckpt.forcing.to_dict(),
        "channel_names": list(ckpt.channel_names),
        "plan": ckpt.plan.to_dict() if ckpt.plan else None,
        "optimizer_step": ckpt.optimizer_step,
        "history": ckpt.history,
        "design_record": backbone.DESIGN_RECORD,
        "run": ckpt.manifest,
        "weights": _save_arrays(ckpt.weights, arrays, "w"),
        "ema_weights": _save_arrays(ckpt.ema_weights, arrays, "ema"),
        "optimizer_state": _save_arrays(ckpt.optimizer_state, arrays, "opt"),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    m = json.loads(mpath.read_text())
    if m.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"checkpoint format version {m.get('format_version')!r} unsupported ({mpath})")
    arrays = path / "arrays"
    return Checkpoint(
        model_config=ModelConfig.from_dict(m["model_config"]),
        grid=GridSpec.from_dict(m["grid"]),
        norm_stats=NormStats.from_dict(m["norm_stats"]),
        forcing=ForcingSpec.from_dict(m["forcing"]),
        channel_names=tuple(m["channel_names"]),
        stage=m["stage"],
        global_step=int(m["global_step"]),
        weights=_load_arrays(m["weights"], arrays),
        ema_weights=_load_arrays(m["ema_weights"], arrays),
        optimizer_state=_load_arrays(m["optimizer_state"], arrays),
        optimizer_step=int(m["optimizer_step"]),
        plan=TrainingPlan.from_dict(m["plan"]) if m.get("plan") else None,
        seed=int(m["seed"]),
        history=m["history"],
        manifest=m.get("run", {}),
    )


# --- validation ---------------------------------------------------------------------


def validation_positions(windows: WindowSet, n_inits: int, max_lead: int) -> np.ndarray:
    """Evenly spaced window positions whose ``max_lead`` truth states stay in the split."""
    last_t = windows.start_index + windows.normalized.shape[0] - 1
    ok = np.nonzero(windows.times + max_lead <= last_t)[0]
    if len(ok) == 0:
        raise ValueError(f"validation split too short for lead {max_lead}")
    n = min(n_inits, len(ok))
    return ok[np.linspace(0, len(ok) - 1, n).round().astype(int)]


@torch.no_grad()
def validation_scores(model: UNet, data: ToyDataset, leads=(1, 2, 4), members: int = 4, n_inits: int = 16,
                      seed: int = 0, crps: bool = True, split: str = "val") -> dict[str, float]:
    """Lead-1 deterministic MAE and dropout-ensemble CRPS per lead, in normalized units."""
    windows: WindowSet = getattr(data, split)
    pos = validation_positions(windows, n_inits, max(leads))
    t = windows.times[pos]
    j = t - windows.start_index
    z = torch.as_tensor(windows.normalized, dtype=torch.float32)
    dtype = next(model.parameters()).dtype
    z = z.to(dtype)
    static = windows.static
    out = {}
    det, _ = autoregress(model, z[j - 1], z[j], t, 1, data.forcing, data.grid, None, static=static)
    out["val_mae"] = float(weighted_mae(det[0].double(), z[j + 1].double(), data.weights).total)
    if not crps:
        return out
    L = max(leads)
    keys = [stream_key(seed, _STAGE_SALT["val"], i, m) for m in range(members) for i in range(len(pos))]
    rep = lambda a: a.repeat(members, 1, 1, 1)  # noqa: E731  member-major stacking
    states, _ = autoregress(model, rep(z[j - 1]), rep(z[j]), np.tile(t, members), L, data.forcing, data.grid,
                            keys, static=static)
    states = states.reshape(L, members, len(pos), *states.shape[2:]).double()
    for lead in leads:
        truth = z[j + lead].double()
        out[f"val_crps_l{lead}"] = float(fair_crps(states[lead - 1], truth, data.weights).total)
    out["val_crps"] = float(np.mean([out[f"val_crps_l{lead}"] for lead in leads]))
    return out


# --- training loop ------------------------------------------------------------------


def _make_checkpoint(model, ema, opt, stage, step, data, plan, seed, history, manifest) -> Checkpoint:
    return Checkpoint(
        model_config=model.config, grid=data.grid, norm_stats=data.stats, forcing=data.forcing,
        channel_names=tuple(data.channel_names), stage=stage, global_step=step,
        weights=_clone(model.state_dict()), ema_weights=_clone(ema.state_dict()),
        optimizer_state=_clone(opt.state_arrays()), optimizer_step=opt.step_count, plan=plan, seed=seed,
        history=copy.deepcopy(history), manifest=dict(manifest),
    )


def _set_residual_scale(model: UNet, stats: NormStats):
    model.residual_scale.copy_(torch.as_tensor(stats.residual_scale, dtype=model.residual_scale.dtype))


def _run(stage: str, model: UNet, ema: UNet, opt: HybridMuonAdamW, data: ToyDataset, plan: TrainingPlan,
         seed: int, start_step: int, n_steps: int, members: int, history: list[dict], manifest: dict,
         stop_at: int | None, step_offset: int = 0) -> Checkpoint:
    """Shared loop. ``step_offset`` shifts the logged step (so Stage 2 continues Stage 1's axis)."""
    n_train = len(data.train)
    spe = plan.epoch_steps(n_train)
    eval_every = plan.eval_every or spe
    decay = opt.config.ema_decay
    recent = deque((h["loss"] for h in history if "loss" in h and h.get("stage") == stage), maxlen=plan.spike_window)
    last_good = _make_checkpoint(model, ema, opt, stage, start_step, data, plan, seed, history, manifest)
    end = n_steps if stop_at is None else min(n_steps, stop_at)
    for step in range(start_step, end):
        idx = batch_indices(seed, step, n_train, plan.batch_size, spe)
        x, y = data.train.arrays(idx)
        x = torch.as_tensor(x, dtype=torch.float32)
        y = torch.as_tensor(y, dtype=torch.float64)
        B = x.shape[0]
        keys = train_keys(seed, stage, step, B, members)
        xs = x.repeat(members, 1, 1, 1) if members > 1 else x
        out = model(xs, keys).double()
        if stage == "stage1":
            loss = weighted_mae(out, y, data.weights).total
        else:
            loss = fair_crps(out.reshape(members, B, *out.shape[1:]), y, data.weights).total
        lv = float(loss.detach())
        if not math.isfinite(lv):
            raise TrainingDiverged(f"{stage}: non-finite loss at step {step}", last_good)
        record = {"stage": stage, "step": step + 1 + step_offset, "loss": lv}
        if len(recent) >= 10 and lv > plan.spike_factor * statistics.median(recent):
            logger.warning("%s step %d: loss %.4g exceeds %gx running median, skipping", stage, step, lv,
                           plan.spike_factor)
            record["skipped"] = True
            history.append(record)
            continue
        opt.zero_grad()
        loss.backward()
        try:
            opt.step(step)
        except FloatingPointError as e:
            raise TrainingDiverged(f"{stage}: {e} at step {step}", last_good) from e
        ema_update(list(ema.parameters()), list(model.parameters()), decay)
        recent.append(lv)
        if (step + 1) % eval_every == 0 or step + 1 == n_steps:
            scores = validation_scores(ema, data, plan.val_leads, plan.val_members, plan.val_inits, seed=0,
                                       crps=stage != "stage1")
            record.update(scores)
            logger.info("%s step %d/%d loss %.4f %s", stage, step + 1, n_steps, lv,
                        " ".join(f"{k}={v:.4f}" for k, v in scores.items()))
            history.append(record)
            last_good = _make_checkpoint(model, ema, opt, stage, step + 1, data, plan, seed, history, manifest)
        else:
            history.append(record)
    return _make_checkpoint(model, ema, opt, stage, end, data, plan, seed, history, manifest)


def _optimizer(model: UNet, cfg: OptimConfig, total: int) -> HybridMuonAdamW:
    cfg = replace(cfg, total_steps=max(total, cfg.warmup_steps, 1))
    adamw = ("out_conv.weight",) if cfg.adamw_for_output else ()
    return HybridMuonAdamW(model.named_parameters(), cfg, adamw_names=adamw)


def _resume(ckpt: Checkpoint, stage: str) -> tuple[UNet, UNet]:
    if ckpt.stage != stage:
        raise ValueError(f"cannot resume {stage} from a {ckpt.stage} checkpoint")
    return ckpt.model(use_ema=False), ckpt.model(use_ema=True)


def train_stage1(plan: TrainingPlan, model: UNet, data: ToyDataset, seed: int | None = None,
                 resume: Checkpoint | None = None, stop_at: int | None = None,
                 baseline_crps: bool = True) -> Checkpoint:
    """Deterministic pre-training on area-weighted MAE (dropout on as a regularizer).

    ``stop_at`` interrupts after that many steps (for resumption tests);
    ``baseline_crps`` scores the finished model as a dropout ensemble.
    """
    if len(data.train) == 0:
        raise ValueError("empty training set")
    seed = plan.seeds[0] if seed is None else seed
    n_steps = plan.stage_steps("stage1", len(data.train))
    manifest = {"data": {"n_train": len(data.train), "n_val": len(data.val)}}
    if resume is not None:
        model, ema = _resume(resume, "stage1")
        history, start = copy.deepcopy(resume.history), resume.global_step
    else:
        _set_residual_scale(model, data.stats)
        ema, history, start = copy.deepcopy(model), [], 0
    opt = _optimizer(model, plan.stage1_optim, n_steps)
    if resume is not None:
        opt.load_state_arrays(resume.optimizer_state, resume.optimizer_step)
    ckpt = _run("stage1", model, ema, opt, data, plan, seed, start, n_steps, 1, history, manifest, stop_at)
    if baseline_crps and ckpt.global_step == n_steps and n_steps > 0:
        scores = validation_scores(ckpt.model(use_ema=True), data, plan.val_leads, plan.val_members,
                                   plan.val_inits, seed=0)
        ckpt.history.append({"stage": "stage1", "step": n_steps, "baseline": True, **scores})
    return ckpt


def train_stage2(plan: TrainingPlan, checkpoint: Checkpoint | None, data: ToyDataset, seed: int | None = None,
                 resume: Checkpoint | None = None, stop_at: int | None = None, model_config: ModelConfig | None = None,
                 n_steps: int | None = None, dropout_rate: float | None = None) -> Checkpoint:
    """Fair-CRPS fine-tuning with M dropout members sharing weights.

    With ``plan.from_scratch_crps`` the model starts from a fresh
    initialization (``checkpoint`` may then be None, ``model_config`` is
    required) and the run is tagged ``scratch``. ``n_steps`` overrides the
    epoch-derived length, e.g. to match a curriculum's total step budget;
    ``dropout_rate`` swaps the rate of a loaded configuration.
    """
    M = plan.train_ensemble_size
    if M < 2:
        raise ValueError(f"Stage 2 needs train_ensemble_size >= 2, got {M}")
    seed = plan.seeds[0] if seed is None else seed
    stage = "scratch" if plan.from_scratch_crps else "stage2"
    steps = plan.stage_steps("stage2", len(data.train)) if n_steps is None else n_steps
    offset = 0
    if resume is not None:
        model, ema = _resume(resume, stage)
        history, start = copy.deepcopy(resume.history), resume.global_step
        offset = resume.manifest.get("step_offset", 0)
        manifest = dict(resume.manifest)
    elif plan.from_scratch_crps:
        config = model_config or (checkpoint.model_config if checkpoint else None)
        if config is None:
            raise ValueError("from-scratch CRPS training needs a model_config")
        if dropout_rate is not None:
            config = replace(config, dropout_rate=dropout_rate)
        model = backbone.build(config, data.grid, seed=seed)
        _set_residual_scale(model, data.stats)
        ema, history, start = copy.deepcopy(model), [], 0
        manifest = {"step_offset": 0, "seed": seed}
    else:
        if checkpoint is None or checkpoint.stage != "stage1":
            raise ValueError("Stage 2 starts from a stage1 checkpoint")
        config = model_config or checkpoint.model_config
        if dropout_rate is not None:
            config = replace(config, dropout_rate=dropout_rate)
        model = _variant_from(checkpoint.weights, config, data.grid, seed)
        ema = _variant_from(checkpoint.ema_weights, config, data.grid, seed)
        history = [h for h in checkpoint.history]
        start = 0
        offset = checkpoint.global_step
        manifest = {"step_offset": offset, "seed": seed, "parent_stage": checkpoint.stage,
                    "parent_step": checkpoint.global_step}
    opt = _optimizer(model, plan.stage2_optim, steps)
    if resume is not None:
        opt.load_state_arrays(resume.optimizer_state, resume.optimizer_step)
    return _run(stage, model, ema, opt, data, plan, seed, start, steps, M, history, manifest, stop_at,
                step_offset=offset)


def _variant_from(weights: dict, config: ModelConfig, grid: GridSpec, seed: int) -> UNet:
    """Load Stage-1 weights into a possibly different stochastic variant.

    Only parameters the Stage-1 network lacks (the zero-initialized adaLN
    layers) may be missing; they keep their fresh initialization.
    """
    model = backbone.build(config, grid, seed=seed)
    result = model.load_state_dict(weights, strict=False)
    if result.unexpected_keys:
        raise ValueError(f"checkpoint has parameters unknown to the model: {result.unexpected_keys[:5]}")
    foreign = [k for k in result.missing_keys if not (k.startswith("map_layer") or ".affine." in k)]
    if foreign:
        raise ValueError(f"checkpoint lacks parameters: {foreign[:5]}")
    return model


def _stage2_job(args):
    plan, stage1_ckpt, data, seed = args
    return train_stage2(plan, stage1_ckpt, data, seed=seed)


def train_deep_ensemble(plan: TrainingPlan, stage1_ckpt: Checkpoint, data: ToyDataset,
                        parallel: int = 1) -> list[Checkpoint]:
    """K independent Stage-2 runs from the same Stage-1 checkpoint, seeds[:K]."""
    K = plan.deep_ensemble_size
    jobs = [(plan, stage1_ckpt, data, s) for s in plan.seeds[:K]]
    if parallel > 1 and K > 1:
        import concurrent.futures as cf
        import multiprocessing as mp

        with cf.ProcessPoolExecutor(max_workers=min(parallel, K), mp_context=mp.get_context("spawn")) as pool:
            return list(pool.map(_stage2_job, jobs))
    return [_stage2_job(j) for j in jobs]
