"""Autoregressive ensemble inference and forecast archives."""

from __future__ import annotations

import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .backbone import UNet, stream_key
from .grid import GridSpec
from .toyatmos import ForcingSpec, NormStats, TrainingWindow, denormalize_values

logger = logging.getLogger(__name__)

ARCHIVE_FORMAT_VERSION = 1
MASK_SCHEDULES = ("per_step", "frozen")


@dataclass
class EnsembleForecast:
    members: np.ndarray                      # (K*N, L, C, H, W)
    init_time: int
    member_ids: list[tuple[int, int]]        # (checkpoint_index, member_seed)
    lead_steps: list[int]
    units: str = "physical"
    channel_names: tuple[str, ...] = ()
    grid: GridSpec | None = None
    norm_stats: NormStats | None = None
    truncated: dict[int, int] = field(default_factory=dict)  # member index -> last finite lead index + 1
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.members.ndim != 5:
            raise ValueError(f"members must be (M, L, C, H, W), got {self.members.shape}")
        if len(self.member_ids) != self.members.shape[0]:
            raise ValueError("member_ids length does not match member count")
        if len(self.lead_steps) != self.members.shape[1]:
            raise ValueError("lead_steps length does not match lead axis")

    @property
    def n_members(self) -> int:
        return self.members.shape[0]


def member_seed(seed: int, checkpoint_index: int, member: int) -> int:
    return stream_key(seed, checkpoint_index, member) & 0x7FFFFFFF


def autoregress(model: UNet, z_prev: torch.Tensor, z_cur: torch.Tensor, t0, n_steps: int, forcing: ForcingSpec,
                grid: GridSpec, seeds: Sequence[int] | None = None, mask_schedule: str = "per_step",
                static: np.ndarray | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """Roll a batch of (x_{t-1}, x_t) pairs forward in normalized space.

    Row b uses dropout stream ``seeds[b]`` (``None`` disables stochasticity).
    Returns the (n_steps, B, C, H, W) states and a per-row count of finite
    steps; rows that blow up are NaN from their first non-finite step on.
    """
    if mask_schedule not in MASK_SCHEDULES:
        raise ValueError(f"mask_schedule must be one of {MASK_SCHEDULES}")
    B = z_cur.shape[0]
    t0 = np.broadcast_to(np.asarray(t0, dtype=np.int64), (B,))
    static = forcing.static_fields(grid) if static is None else static
    static_t = torch.as_tensor(np.asarray(static), dtype=z_cur.dtype).expand(B, -1, -1, -1)
    out = torch.full((n_steps, *z_cur.shape), float("nan"), dtype=z_cur.dtype)
    alive = torch.ones(B, dtype=torch.bool)
    n_finite = torch.zeros(B, dtype=torch.long)
    H, W = grid.shape
    for s in range(n_steps):
        clk = torch.as_tensor(forcing.clock(t0 + s), dtype=z_cur.dtype)[:, :, None, None].expand(B, 2, H, W)
        x = torch.cat([z_prev, z_cur, clk, static_t], dim=1)
        keys = None
        if seeds is not None:
            k = s if mask_schedule == "per_step" else 0
            keys = [stream_key(sd, k) for sd in seeds]
        with torch.no_grad():
            z_next = z_cur + model(x, keys)
        finite = torch.isfinite(z_next).flatten(1).all(dim=1)
        newly_dead = alive & ~finite
        if newly_dead.any():
            logger.warning("truncating %d member(s) at step %d: non-finite state", int(newly_dead.sum()), s + 1)
        alive &= finite
        z_next = torch.where(alive[:, None, None, None], z_next, torch.full_like(z_next, float("nan")))
        out[s] = z_next
        n_finite += alive.long()
        z_prev, z_cur = z_cur, z_next
    return out, n_finite


def roll_forward(checkpoints, init_window: TrainingWindow, n_steps: int, members_per_ckpt: int, seed: int = 0,
                 stochastic: bool = True, mask_schedule: str = "per_step", use_ema: bool = True,
                 physical: bool = True) -> EnsembleForecast:
    """K checkpoints x N dropout members, rolled out ``n_steps`` from one window."""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if members_per_ckpt < 1:
        raise ValueError("members_per_ckpt must be >= 1")
    if not checkpoints:
        raise ValueError("need at least one checkpoint")
    ref = checkpoints[0]
    for ck in checkpoints[1:]:
        if ck.grid != ref.grid or ck.norm_stats.to_dict() != ref.norm_stats.to_dict():
            raise ValueError("checkpoints disagree on grid or normalization statistics")
    C = init_window.n_channels
    blocks, ids, counts = [], [], []
    for k, ck in enumerate(checkpoints):
        model = ck.inference_model(use_ema=use_ema)
        dtype = next(model.parameters()).dtype
        inputs = torch.as_tensor(init_window.inputs, dtype=dtype)
        z_prev = inputs[:C].expand(members_per_ckpt, -1, -1, -1)
        z_cur = inputs[C:].expand(members_per_ckpt, -1, -1, -1)
        seeds = [member_seed(seed, k, n) for n in range(members_per_ckpt)]
        states, n_finite = autoregress(model, z_prev, z_cur, init_window.time_index, n_steps, ck.forcing, ck.grid,
                                       seeds if stochastic else None, mask_schedule)
        blocks.append(states.transpose(0, 1).double().numpy())
        ids.extend((k, s) for s in seeds)
        counts.extend(int(c) for c in n_finite)
    members = np.concatenate(blocks, axis=0)
    if physical:
        members = denormalize_values(members, ref.norm_stats)
    truncated = {i: c for i, c in enumerate(counts) if c < n_steps}
    return EnsembleForecast(
        members=members,
        init_time=int(init_window.time_index),
        member_ids=ids,
        lead_steps=list(range(1, n_steps + 1)),
        units="physical" if physical else "normalized",
        channel_names=tuple(ref.channel_names),
        grid=ref.grid,
        norm_stats=ref.norm_stats,
        truncated=truncated,
        metadata={"mask_schedule": mask_schedule, "stochastic": stochastic, "seed": seed,
                  "n_checkpoints": len(checkpoints), "members_per_ckpt": members_per_ckpt},
    )


# --- archives ----------------------------------------------------------------------


class ArchiveError(ValueError):
    pass


def write_archive(forecast: EnsembleForecast, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    M, L, C, H, W = forecast.members.shape
    files = []
    for i in range(M):
        name = f"member_{i:04d}.bin"
        np.ascontiguousarray(forecast.members[i], dtype="<f4").tofile(path / name)
        files.append(name)
    manifest = {
        "format_version": ARCHIVE_FORMAT_VERSION,
        "n_members": M,
        "n_leads": L,
        "n_channels": C,
        "n_lat": H,
        "n_lon": W,
        "dtype": "<f4",
        "layout": "L,C,H,W row-major per member",
        "grid": forecast.grid.to_dict() if forecast.grid else None,
        "norm_stats": forecast.norm_stats.to_dict() if forecast.norm_stats else None,
        "member_ids": [list(m) for m in forecast.member_ids],
        "lead_steps": list(forecast.lead_steps),
        "init_time": forecast.init_time,
        "units": forecast.units,
        "channel_names": list(forecast.channel_names),
        "truncated": {str(k): v for k, v in forecast.truncated.items()},
        "metadata": forecast.metadata,
        "files": files,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2))


def read_archive(path) -> EnsembleForecast:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no forecast archive manifest at {mpath}")
    try:
        m = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ArchiveError(f"corrupt archive manifest {mpath}: {e}") from e
    version = m.get("format_version")
    if version != ARCHIVE_FORMAT_VERSION:
        raise ArchiveError(f"archive format version {version!r} does not match supported version "
                           f"{ARCHIVE_FORMAT_VERSION} ({mpath})")
    try:
        shape = (m["n_leads"], m["n_channels"], m["n_lat"], m["n_lon"])
        members = np.empty((m["n_members"], *shape), dtype=np.float64)
        for i, name in enumerate(m["files"]):
            members[i] = np.fromfile(path / name, dtype="<f4").reshape(shape)
        return EnsembleForecast(
            members=members,
            init_time=int(m["init_time"]),
            member_ids=[tuple(x) for x in m["member_ids"]],
            lead_steps=list(m["lead_steps"]),
            units=m["units"],
            channel_names=tuple(m["channel_names"]),
            grid=GridSpec.from_dict(m["grid"]) if m.get("grid") else None,
            norm_stats=NormStats.from_dict(m["norm_stats"]) if m.get("norm_stats") else None,
            truncated={int(k): v for k, v in m.get("truncated", {}).items()},
            metadata=m.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ArchiveError):
            raise
        raise ArchiveError(f"corrupt archive manifest {mpath}: {e!r}") from e
