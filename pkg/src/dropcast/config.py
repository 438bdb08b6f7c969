"""Flat TOML run configuration.

One key per setting, grouped only by naming convention. Optimizer settings
appear twice, prefixed ``stage1_`` and ``stage2_``; their ``total_steps`` is
not configurable because it is derived from the epoch counts.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli
import tomlkit

from .backbone import ModelConfig
from .curriculum import TrainingPlan
from .grid import GridSpec, make_equiangular_grid
from .optimizers import OptimConfig
from .toyatmos import DynamicsParams, ForcingSpec

OUTPUT_ROOT_ENV = "DROPCAST_OUTPUT_ROOT"
_OPTIM_KEYS = [f.name for f in fields(OptimConfig) if f.name != "total_steps"]


class ConfigError(ValueError):
    pass


def _f(default, doc: str):
    if isinstance(default, list):
        return field(default_factory=lambda: list(default), metadata={"doc": doc})
    return field(default=default, metadata={"doc": doc})


@dataclass
class RunConfig:
    run_id: str = _f("default", "name of the run directory under output_root")
    output_root: str = _f("runs", f"root for all artifacts (overridden by ${OUTPUT_ROOT_ENV})")

    # toy planet
    n_lat: int = _f(32, "latitude rows")
    n_lon: int = _f(64, "longitude columns")
    n_steps: int = _f(5000, "simulated states, split 80/10/10 into train/val/test")
    n_channels: int = _f(4, "prognostic channels")
    advection_speed: list = _f([0.5, 1.0, -0.75, 1.5], "zonal advection per channel, cells per step")
    diffusion_coeff: list = _f([0.05, 0.1, 0.03, 0.08], "diffusion per channel, at most 0.25")
    forcing_amplitude: float = _f(0.1, "stochastic forcing amplitude (relative to channel scale)")
    coupling_strength: float = _f(0.02, "quadratic cross-channel coupling")
    damping: float = _f(0.01, "relaxation rate toward the channel baseline")
    data_seed: int = _f(0, "seed of the simulated trajectory")
    clock_period: int = _f(24, "steps per period of the sin/cos clock forcing")
    static_seed: int = _f(1234, "seed of the static orography/mask fields")

    # network
    base_width: int = _f(8, "channels at the finest level")
    channel_multipliers: list = _f([1, 2, 3, 4], "width multiplier per level")
    blocks_per_resolution: int = _f(1, "residual blocks per encoder level")
    attention_levels: list = _f([0, 1], "levels with self-attention, counted from the coarsest")
    dropout_rate: float = _f(0.1, "Monte Carlo dropout rate inside residual blocks")
    stochastic_mode: str = _f("dropout", "dropout | adaln_noise | deterministic")
    noise_dim: int = _f(32, "noise vector size for adaln_noise")
    head_width: int = _f(64, "channels per attention head")
    emb_multiplier: int = _f(4, "adaLN embedding width as a multiple of base_width")
    max_groups: int = _f(32, "GroupNorm group cap")
    model_seed: int = _f(0, "weight initialization seed")

    # training plan
    stage1_epochs: int = _f(12, "deterministic MAE epochs")
    stage2_epochs: int = _f(4, "fair-CRPS fine-tuning epochs")
    batch_size: int = _f(8, "samples per gradient step")
    train_ensemble_size: int = _f(2, "dropout members per sample in Stage 2 (M)")
    deep_ensemble_size: int = _f(1, "independent Stage-2 runs (K)")
    seeds: list = _f([0, 1, 2, 3], "one seed per Stage-2 run; seeds[0] also drives Stage 1")
    from_scratch_crps: bool = _f(False, "train on CRPS from a fresh init instead of fine-tuning")
    steps_per_epoch: int = _f(100, "cap on steps per epoch; 0 means full passes over the data")
    eval_every: int = _f(25, "validation cadence in steps; 0 means once per epoch")
    val_leads: list = _f([1, 2, 4], "validation lead times")
    val_members: int = _f(4, "dropout members in validation ensembles")
    val_inits: int = _f(16, "validation initializations")
    spike_factor: float = _f(10.0, "skip a step whose loss exceeds this multiple of the running median")
    spike_window: int = _f(50, "running-median window for the spike guard")
    run_stage2: bool = _f(True, "train: run Stage 2 after Stage 1")
    run_scratch: bool = _f(False, "train: also run the from-scratch CRPS ablation at equal step budget")

    # optimizers (stage1_*, stage2_*)
    stage1_muon_peak_lr: float = _f(3e-3, "Stage-1 Muon peak learning rate")
    stage1_adamw_peak_lr: float = _f(3e-4, "Stage-1 AdamW peak learning rate")
    stage1_muon_weight_decay: float = _f(0.1, "Stage-1 Muon decoupled weight decay")
    stage1_adamw_weight_decay: float = _f(0.03, "Stage-1 AdamW decoupled weight decay")
    stage1_warmup_steps: int = _f(50, "Stage-1 linear warmup steps")
    stage1_momentum: float = _f(0.95, "Stage-1 Muon momentum")
    stage1_nesterov: bool = _f(True, "Stage-1 Nesterov momentum")
    stage1_ns_iterations: int = _f(5, "Stage-1 Newton-Schulz iterations")
    stage1_ema_decay: float = _f(0.99, "Stage-1 EMA decay")
    stage1_adam_betas: list = _f([0.9, 0.95], "Stage-1 AdamW betas")
    stage1_adam_eps: float = _f(1e-8, "Stage-1 AdamW epsilon")
    stage1_use_muon: bool = _f(True, "Stage-1 Muon for matrices (false: AdamW everywhere)")
    stage1_adamw_for_output: bool = _f(False, "Stage-1 AdamW for the output convolution")
    stage2_muon_peak_lr: float = _f(7e-3, "Stage-2 Muon peak learning rate")
    stage2_adamw_peak_lr: float = _f(7e-5, "Stage-2 AdamW peak learning rate")
    stage2_muon_weight_decay: float = _f(0.1, "Stage-2 Muon decoupled weight decay")
    stage2_adamw_weight_decay: float = _f(0.03, "Stage-2 AdamW decoupled weight decay")
    stage2_warmup_steps: int = _f(50, "Stage-2 linear warmup steps")
    stage2_momentum: float = _f(0.95, "Stage-2 Muon momentum")
    stage2_nesterov: bool = _f(True, "Stage-2 Nesterov momentum")
    stage2_ns_iterations: int = _f(5, "Stage-2 Newton-Schulz iterations")
    stage2_ema_decay: float = _f(0.99, "Stage-2 EMA decay")
    stage2_adam_betas: list = _f([0.9, 0.95], "Stage-2 AdamW betas")
    stage2_adam_eps: float = _f(1e-8, "Stage-2 AdamW epsilon")
    stage2_use_muon: bool = _f(True, "Stage-2 Muon for matrices (false: AdamW everywhere)")
    stage2_adamw_for_output: bool = _f(False, "Stage-2 AdamW for the output convolution")

    # rollout
    forecast_steps: int = _f(8, "autoregressive steps per forecast")
    members_per_ckpt: int = _f(4, "dropout members per checkpoint (N)")
    forecast_seed: int = _f(0, "seed of the inference dropout streams")
    mask_schedule: str = _f("per_step", "per_step | frozen")
    n_forecast_inits: int = _f(20, "initializations, evenly spaced over the forecast split")
    forecast_split: str = _f("test", "val | test")
    forecast_checkpoints: str = _f("stage2", "stage1 | stage2 | scratch")
    use_ema: bool = _f(True, "roll out EMA weights")

    # evaluation
    spectrum_band_fraction: float = _f(0.5, "central fraction of latitude rows used for spectra")

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.type in ("int", int) and (isinstance(v, bool) or not isinstance(v, int)):
                raise ConfigError(f"{f.name} must be an integer, got {v!r}")
            if f.type in ("float", float):
                if isinstance(v, bool) or not isinstance(v, (int, float)):
                    raise ConfigError(f"{f.name} must be a number, got {v!r}")
                setattr(self, f.name, float(v))
            if f.type in ("bool", bool) and not isinstance(v, bool):
                raise ConfigError(f"{f.name} must be true or false, got {v!r}")
            if f.type in ("str", str) and not isinstance(v, str):
                raise ConfigError(f"{f.name} must be a string, got {v!r}")
            if f.type in ("list", list):
                if isinstance(v, tuple):
                    setattr(self, f.name, list(v))
                elif not isinstance(v, list):
                    raise ConfigError(f"{f.name} must be a list, got {v!r}")
        if self.mask_schedule not in ("per_step", "frozen"):
            raise ConfigError(f"mask_schedule must be per_step or frozen, got {self.mask_schedule!r}")
        if self.forecast_split not in ("val", "test"):
            raise ConfigError(f"forecast_split must be val or test, got {self.forecast_split!r}")
        if self.forecast_checkpoints not in ("stage1", "stage2", "scratch"):
            raise ConfigError(f"forecast_checkpoints must be stage1, stage2 or scratch, got {self.forecast_checkpoints!r}")
        if not self.run_id or "/" in self.run_id:
            raise ConfigError(f"invalid run_id {self.run_id!r}")
        try:
            self.dynamics().check_stability()
            self.model_config()
            self.plan()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e

    # -- typed views ---------------------------------------------------------------

    def grid(self) -> GridSpec:
        return make_equiangular_grid(self.n_lat, self.n_lon)

    def dynamics(self) -> DynamicsParams:
        return DynamicsParams(self.n_channels, tuple(self.advection_speed), tuple(self.diffusion_coeff),
                              self.forcing_amplitude, self.coupling_strength, self.damping, self.data_seed)

    def forcing(self) -> ForcingSpec:
        return ForcingSpec(self.clock_period, self.static_seed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            in_channels=2 * self.n_channels + ForcingSpec.n_forcings, out_channels=self.n_channels,
            base_width=self.base_width, channel_multipliers=tuple(self.channel_multipliers),
            blocks_per_resolution=self.blocks_per_resolution, attention_levels=tuple(self.attention_levels),
            dropout_rate=self.dropout_rate, stochastic_mode=self.stochastic_mode, noise_dim=self.noise_dim,
            head_width=self.head_width, emb_multiplier=self.emb_multiplier, max_groups=self.max_groups)

    def optim(self, stage: int) -> OptimConfig:
        p = f"stage{stage}_"
        return OptimConfig(**{k: getattr(self, p + k) for k in _OPTIM_KEYS})

    def plan(self) -> TrainingPlan:
        return TrainingPlan(
            stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs, batch_size=self.batch_size,
            train_ensemble_size=self.train_ensemble_size, deep_ensemble_size=self.deep_ensemble_size,
            stage1_optim=self.optim(1), stage2_optim=self.optim(2), seeds=tuple(self.seeds),
            from_scratch_crps=self.from_scratch_crps, steps_per_epoch=self.steps_per_epoch or None,
            eval_every=self.eval_every or None, val_leads=tuple(self.val_leads), val_members=self.val_members,
            val_inits=self.val_inits, spike_factor=self.spike_factor, spike_window=self.spike_window)

    @property
    def run_dir(self) -> Path:
        root = os.environ.get(OUTPUT_ROOT_ENV) or self.output_root
        return Path(root) / self.run_id

    # -- (de)serialization -----------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> RunConfig:
        return from_dict({**self.to_dict(), **changes})


def documented_keys() -> dict[str, tuple[object, str]]:
    """key -> (default, description) for every configurable field."""
    out = {}
    for f in fields(RunConfig):
        default = f.default_factory() if f.default is dataclasses.MISSING else f.default
        out[f.name] = (default, f.metadata["doc"])
    return out


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        return RunConfig(**d)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def parse_value(text: str):
    """A TOML literal if it parses as one, otherwise the bare string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def parse_overrides(pairs) -> dict:
    out = {}
    for p in pairs or ():
        if "=" not in p:
            raise ConfigError(f"override {p!r} is not of the form key=value")
        k, v = p.split("=", 1)
        out[k.strip()] = parse_value(v.strip())
    return out


def load(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file {path} not found")
        try:
            data = tomli.loads(path.read_text())
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        nested = [k for k, v in data.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"config is flat; unexpected table(s): {', '.join(nested)}")
    data.update(parse_overrides(overrides))
    return from_dict(data)


def dumps(cfg: RunConfig) -> str:
    doc = tomlkit.document()
    docs = documented_keys()
    for k, v in cfg.to_dict().items():
        doc.add(tomlkit.comment(docs[k][1]))
        doc.add(k, v)
    return tomlkit.dumps(doc)


def save(cfg: RunConfig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(dumps(cfg))
