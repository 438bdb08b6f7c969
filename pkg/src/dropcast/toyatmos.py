"""Synthetic "toy planet" trajectories and training windows.

The dynamics are a stand-in for reanalysis data: per-channel semi-Lagrangian
advection along longitude, conservative explicit diffusion, a weak quadratic
cross-channel coupling, linear relaxation toward a channel baseline and seeded
smooth stochastic forcing. Everything is periodic in longitude, so the
operator commutes with circular shifts of the grid.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .grid import GridSpec, area_weights

logger = logging.getLogger(__name__)

TRAJECTORY_FORMAT_VERSION = 1
CHUNK_STEPS = 256
N_IC_MODES = 8
N_FORCING_MODES = 6


def _per_channel(value, n: int, name: str) -> tuple[float, ...]:
    if np.isscalar(value):
        return (float(value),) * n
    value = tuple(float(v) for v in value)
    if len(value) != n:
        raise ValueError(f"{name} needs {n} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class DynamicsParams:
    n_channels: int = 4
    advection_speed: tuple[float, ...] | float = (0.5, 1.0, -0.75, 1.5)
    diffusion_coeff: tuple[float, ...] | float = (0.05, 0.1, 0.03, 0.08)
    forcing_amplitude: float = 0.1
    coupling_strength: float = 0.02
    damping: float = 0.01
    seed: int = 0
    channel_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValueError("n_channels must be positive")
        object.__setattr__(self, "advection_speed", _per_channel(self.advection_speed, self.n_channels, "advection_speed"))
        object.__setattr__(self, "diffusion_coeff", _per_channel(self.diffusion_coeff, self.n_channels, "diffusion_coeff"))
        if self.channel_names is None:
            object.__setattr__(self, "channel_names", tuple(f"var{c}" for c in range(self.n_channels)))
        else:
            object.__setattr__(self, "channel_names", tuple(self.channel_names))
        if len(self.channel_names) != self.n_channels:
            raise ValueError("channel_names must have n_channels entries")
        if self.forcing_amplitude < 0 or self.coupling_strength < 0 or self.damping < 0:
            raise ValueError("forcing_amplitude, coupling_strength and damping must be nonnegative")

    def check_stability(self):
        for d in self.diffusion_coeff:
            if d < 0 or d > 0.25:
                raise ValueError(f"diffusion_coeff {d} outside the explicit-scheme bound [0, 0.25]")
        if self.damping > 1:
            raise ValueError("damping above 1 overshoots the baseline")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["advection_speed"] = list(self.advection_speed)
        d["diffusion_coeff"] = list(self.diffusion_coeff)
        d["channel_names"] = list(self.channel_names)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DynamicsParams:
        return cls(**d)


@dataclass
class StateTensor:
    values: np.ndarray
    time_index: int
    channel_names: tuple[str, ...]

    def __post_init__(self):
        if self.values.ndim != 3 or self.values.shape[0] != len(self.channel_names):
            raise ValueError(f"state shape {self.values.shape} does not match {len(self.channel_names)} channels")


class Trajectory(Sequence):
    """A simulated run, stored as one (T, C, H, W) float32 array."""

    def __init__(self, values: np.ndarray, grid: GridSpec, channel_names, params: DynamicsParams | None = None,
                 start_index: int = 0):
        if values.ndim != 4 or values.shape[2:] != grid.shape:
            raise ValueError(f"trajectory shape {values.shape} inconsistent with grid {grid.shape}")
        self.values = values
        self.grid = grid
        self.channel_names = tuple(channel_names)
        self.params = params
        self.start_index = start_index

    def __len__(self):
        return self.values.shape[0]

    def __getitem__(self, i):
        if isinstance(i, slice):
            start = range(len(self))[i].start
            return Trajectory(self.values[i], self.grid, self.channel_names, self.params, self.start_index + start)
        if i < 0:
            i += len(self)
        return StateTensor(self.values[i], self.start_index + i, self.channel_names)


def _baseline(n_channels: int) -> tuple[np.ndarray, np.ndarray]:
    offsets = 5.0 * np.arange(n_channels)
    scales = 1.0 + 0.5 * np.arange(n_channels)
    return offsets, scales


def _mode_field(rng: np.random.Generator, grid: GridSpec, n_modes: int, max_k: int, max_l: int,
                decay: bool, n_fields: int | None = None) -> np.ndarray:
    """Sum of random zonal x meridional Fourier modes on the grid.

    Returns (H, W), or (n_fields, H, W) when ``n_fields`` is given.
    """
    lon = np.deg2rad(grid.lon_centers)
    colat = np.deg2rad(grid.lat_centers + 90.0)
    shape = (n_fields or 1, n_modes)
    k = rng.integers(0, max_k + 1, size=shape)
    l = rng.integers(1, max_l + 1, size=shape)
    amp = rng.standard_normal(shape)
    if decay:
        amp = amp / np.hypot(k, l)
    phase_lon = rng.uniform(0, 2 * np.pi, size=shape)
    phase_lat = rng.uniform(0, np.pi, size=shape)
    merid = np.sin(l[..., None] * colat / 2 + phase_lat[..., None])       # (n, m, H)
    zonal = amp[..., None] * np.cos(k[..., None] * lon + phase_lon[..., None])  # (n, m, W)
    out = np.einsum("nmh,nmw->nhw", merid, zonal)
    return out if n_fields else out[0]


def initial_condition(grid: GridSpec, params: DynamicsParams) -> np.ndarray:
    rng = np.random.default_rng([params.seed, 0])
    offsets, scales = _baseline(params.n_channels)
    x = np.empty((params.n_channels, *grid.shape))
    for c in range(params.n_channels):
        f = _mode_field(rng, grid, N_IC_MODES, max_k=8, max_l=6, decay=True)
        f /= f.std() + 1e-12
        x[c] = offsets[c] + scales[c] * f
    return x


def _advect(x: np.ndarray, speeds) -> np.ndarray:
    out = np.empty_like(x)
    for c, s in enumerate(speeds):
        i = int(np.floor(s))
        f = s - i
        shifted = np.roll(x[c], i, axis=-1)
        if f == 0:
            out[c] = shifted
        else:
            out[c] = (1 - f) * shifted + f * np.roll(x[c], i + 1, axis=-1)
    return out


def _diffusion_tendency(x: np.ndarray, coeffs: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Flux-form Laplacian; conserves the area-weighted sum of every channel."""
    lon = np.roll(x, 1, axis=-1) + np.roll(x, -1, axis=-1) - 2 * x
    k = np.minimum(weights[:-1], weights[1:])[:, None]
    flux = k * (x[:, 1:, :] - x[:, :-1, :])
    lat = np.zeros_like(x)
    lat[:, :-1, :] += flux
    lat[:, 1:, :] -= flux
    lat /= weights[:, None]
    return coeffs[:, None, None] * (lon + lat)


def step_state(x: np.ndarray, params: DynamicsParams, weights: np.ndarray, noise: np.ndarray | None = None) -> np.ndarray:
    """One float64 step: advect, then add diffusion, coupling, damping and forcing tendencies.

    ``noise`` is the (C, H, W) forcing draw; it is ignored when the forcing
    amplitude is zero.
    """
    offsets, scales = _baseline(params.n_channels)
    coeffs = np.asarray(params.diffusion_coeff)
    x = _advect(x, params.advection_speed)
    dx = np.zeros_like(x)
    if coeffs.any():
        dx += _diffusion_tendency(x, coeffs, weights)
    if params.coupling_strength:
        anom = (x - offsets[:, None, None]) / scales[:, None, None]
        dx += params.coupling_strength * scales[:, None, None] * np.roll(anom, -1, axis=0) * np.roll(anom, -2, axis=0)
    if params.damping:
        dx -= params.damping * (x - offsets[:, None, None])
    if params.forcing_amplitude and noise is not None:
        dx += params.forcing_amplitude * scales[:, None, None] * noise
    return x + dx


def simulate(grid: GridSpec, params: DynamicsParams, n_steps: int, initial: np.ndarray | None = None) -> Trajectory:
    """Run the toy dynamics for ``n_steps`` states (the initial state included)."""
    params.check_stability()
    if n_steps < 1:
        raise ValueError("n_steps must be positive")
    C = params.n_channels
    x = initial_condition(grid, params) if initial is None else np.array(initial, dtype=np.float64)
    if x.shape != (C, *grid.shape):
        raise ValueError(f"initial state shape {x.shape} != {(C, *grid.shape)}")
    weights = area_weights(grid).normalized
    noise_rng = np.random.default_rng([params.seed, 1])
    out = np.empty((n_steps, C, *grid.shape), dtype=np.float32)
    out[0] = x
    for t in range(1, n_steps):
        noise = None
        if params.forcing_amplitude:
            noise = _mode_field(noise_rng, grid, N_FORCING_MODES, max_k=6, max_l=4, decay=False, n_fields=C)
        x = step_state(x, params, weights, noise)
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"toy dynamics diverged at step {t}")
        out[t] = x
    return Trajectory(out, grid, params.channel_names, params)


def split_bounds(n_steps: int, fractions=(0.8, 0.1, 0.1)) -> dict[str, tuple[int, int]]:
    """Contiguous train/val/test index ranges (half-open), in temporal order."""
    a = int(round(n_steps * fractions[0]))
    b = a + int(round(n_steps * fractions[1]))
    return {"train": (0, a), "val": (a, b), "test": (b, n_steps)}


# --- normalization ------------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    diff_std: np.ndarray

    def __post_init__(self):
        for name in ("std", "diff_std"):
            v = np.asarray(getattr(self, name))
            if not np.all(v > 0):
                raise ValueError(f"NormStats.{name} must be positive, got {v}")

    @property
    def residual_scale(self) -> np.ndarray:
        """Typical one-step change in normalized units, per channel."""
        return np.asarray(self.diff_std) / np.asarray(self.std)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k), dtype=np.float64).tolist() for k in ("mean", "std", "diff_std")}

    @classmethod
    def from_dict(cls, d: dict) -> NormStats:
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "diff_std")))


def fit_norm_stats(trajectory) -> NormStats:
    values = trajectory.values if isinstance(trajectory, Trajectory) else np.stack([s.values for s in trajectory])
    v = values.astype(np.float64)
    mean = v.mean(axis=(0, 2, 3))
    std = v.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        bad = [int(c) for c in np.nonzero(std <= 0)[0]]
        raise ValueError(f"zero-variance channel(s) {bad}")
    if v.shape[0] < 2:
        raise ValueError("need at least two states to fit difference statistics")
    diff_std = np.diff(v, axis=0).std(axis=(0, 2, 3))
    if np.any(diff_std <= 0):
        bad = [int(c) for c in np.nonzero(diff_std <= 0)[0]]
        raise ValueError(f"zero-variance one-step differences in channel(s) {bad}")
    return NormStats(mean, std, diff_std)


def normalize(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return (values - stats.mean[:, None, None]) / stats.std[:, None, None]


def denormalize_values(values: np.ndarray, stats: NormStats) -> np.ndarray:
    return values * stats.std[:, None, None] + stats.mean[:, None, None]


def denormalize(state: StateTensor, stats: NormStats) -> StateTensor:
    return StateTensor(denormalize_values(state.values.astype(np.float64), stats), state.time_index, state.channel_names)


# --- forcings and windows -----------------------------------------------------------


@dataclass(frozen=True)
class ForcingSpec:
    """Two static fields (orography-like field and a binary mask) plus a sin/cos clock."""

    clock_period: int = 24
    static_seed: int = 1234

    n_forcings = 4

    def static_fields(self, grid: GridSpec) -> np.ndarray:
        rng = np.random.default_rng([self.static_seed, 7])
        oro = _mode_field(rng, grid, 12, max_k=10, max_l=8, decay=True)
        oro = (oro - oro.mean()) / (oro.std() + 1e-12)
        mask = (oro > 0.3).astype(np.float64)
        return np.stack([oro, mask])

    def clock(self, t) -> np.ndarray:
        if self.clock_period < 1:
            raise ValueError("clock_period must be positive")
        phase = 2 * np.pi * np.asarray(t, dtype=np.float64) / self.clock_period
        return np.stack([np.sin(phase), np.cos(phase)], axis=-1)

    def fields(self, grid: GridSpec, t, static: np.ndarray | None = None) -> np.ndarray:
        """Forcing channels for the input window ending at time ``t``: (F, H, W)."""
        static = self.static_fields(grid) if static is None else static
        clk = self.clock(t)
        clock_maps = np.broadcast_to(clk[:, None, None], (2, *grid.shape))
        return np.concatenate([clock_maps, static], axis=0)

    def to_dict(self) -> dict:
        return {"clock_period": self.clock_period, "static_seed": self.static_seed}

    @classmethod
    def from_dict(cls, d: dict) -> ForcingSpec:
        return cls(int(d["clock_period"]), int(d["static_seed"]))


@dataclass
class TrainingWindow:
    inputs: np.ndarray           # (2C, H, W): normalized x_{t-1}, x_t
    forcings: np.ndarray         # (F, H, W)
    target_residual: np.ndarray  # (C, H, W): normalized x_{t+1} - x_t
    time_index: int

    @property
    def n_channels(self) -> int:
        return self.target_residual.shape[0]

    @property
    def model_input(self) -> np.ndarray:
        return np.concatenate([self.inputs, self.forcings], axis=0)

    @property
    def last_state(self) -> np.ndarray:
        return self.inputs[self.n_channels:]


class WindowSet(Sequence):
    """Lazily materialized windows over a normalized trajectory.

    ``times`` are absolute time indices ``t`` of the last input state. Read-only
    after construction, so concurrent readers are safe.
    """

    def __init__(self, normalized: np.ndarray, grid: GridSpec, forcing: ForcingSpec, times, start_index: int = 0):
        self.normalized = normalized
        self.grid = grid
        self.forcing = forcing
        self.times = np.asarray(times, dtype=np.int64)
        self.start_index = start_index
        self.static = forcing.static_fields(grid).astype(np.float32)

    def __len__(self):
        return len(self.times)

    def __getitem__(self, i) -> TrainingWindow:
        t = int(self.times[i])
        j = t - self.start_index
        z = self.normalized
        return TrainingWindow(
            inputs=np.concatenate([z[j - 1], z[j]], axis=0),
            forcings=self.forcing.fields(self.grid, t, self.static).astype(np.float32),
            target_residual=z[j + 1] - z[j],
            time_index=t,
        )

    def arrays(self, idx) -> tuple[np.ndarray, np.ndarray]:
        """Batched (model_input, target_residual) for window positions ``idx``."""
        idx = np.asarray(idx)
        t = self.times[idx]
        j = t - self.start_index
        z = self.normalized
        clk = self.forcing.clock(t).astype(np.float32)
        B = len(idx)
        H, W = self.grid.shape
        x = np.concatenate([
            z[j - 1], z[j],
            np.broadcast_to(clk[:, :, None, None], (B, 2, H, W)),
            np.broadcast_to(self.static, (B, 2, H, W)),
        ], axis=1)
        y = z[j + 1] - z[j]
        return x, y


def make_windows(trajectory: Trajectory, stats: NormStats, clock_period: int = 24,
                 forcing: ForcingSpec | None = None, bounds: tuple[int, int] | None = None) -> WindowSet:
    """One window per t with t-1, t, t+1 inside ``bounds`` (default: the whole trajectory)."""
    forcing = forcing or ForcingSpec(clock_period=clock_period)
    lo, hi = bounds if bounds is not None else (0, len(trajectory))
    if hi - lo < 3:
        raise ValueError(f"need at least 3 states for a window, got {hi - lo}")
    z = normalize(trajectory.values[lo:hi].astype(np.float64), stats).astype(np.float32)
    start = trajectory.start_index + lo
    return WindowSet(z, trajectory.grid, forcing, np.arange(start + 1, start + (hi - lo) - 1), start_index=start)


def persistence_mae(windows: WindowSet, weights: np.ndarray) -> float:
    """Area-weighted MAE of predicting zero change, channel-averaged."""
    total = 0.0
    for i in range(len(windows)):
        r = np.abs(windows[i].target_residual.astype(np.float64))
        total += float((r * weights[None, :, None]).mean())
    return total / len(windows)


# --- persistence on disk ------------------------------------------------------------


def save_trajectory(traj: Trajectory, path, stats: NormStats | None = None, forcing: ForcingSpec | None = None,
                    extra: dict | None = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    chunks = []
    for k, start in enumerate(range(0, len(traj), CHUNK_STEPS)):
        block = np.ascontiguousarray(traj.values[start:start + CHUNK_STEPS], dtype="<f4")
        name = f"chunk_{k:05d}.bin"
        block.tofile(path / name)
        chunks.append({"file": name, "start": start, "n_steps": int(block.shape[0])})
    manifest = {
        "format_version": TRAJECTORY_FORMAT_VERSION,
        "grid": traj.grid.to_dict(),
        "params": traj.params.to_dict() if traj.params else None,
        "channel_names": list(traj.channel_names),
        "n_steps": len(traj),
        "start_index": traj.start_index,
        "dtype": "<f4",
        "layout": "T,C,H,W row-major",
        "chunks": chunks,
        "norm_stats": stats.to_dict() if stats else None,
        "forcing": forcing.to_dict() if forcing else None,
        "grid_convention": "cell-centered equal-angle bands, no pole row",
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_trajectory(path) -> tuple[Trajectory, dict]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no trajectory manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != TRAJECTORY_FORMAT_VERSION:
        raise ValueError(f"trajectory format version {manifest.get('format_version')} unsupported")
    grid = GridSpec.from_dict(manifest["grid"])
    C = len(manifest["channel_names"])
    values = np.empty((manifest["n_steps"], C, *grid.shape), dtype=np.float32)
    for ch in manifest["chunks"]:
        block = np.fromfile(path / ch["file"], dtype="<f4").reshape(ch["n_steps"], C, *grid.shape)
        values[ch["start"]:ch["start"] + ch["n_steps"]] = block
    params = DynamicsParams.from_dict(manifest["params"]) if manifest.get("params") else None
    traj = Trajectory(values, grid, manifest["channel_names"], params, manifest.get("start_index", 0))
    return traj, manifest
