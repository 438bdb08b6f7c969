"""Area-weighted L1 / fair-CRPS training objectives.

All functions take torch tensors laid out as ``(..., C, H, W)``; ensembles
carry the member axis first: ``(M, ..., C, H, W)``. Per-channel scores are
spatial means of ``a_h * score`` averaged over any leading batch axes, then
combined with the channel weights as a weighted mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

PAIRWISE_MAX_MEMBERS = 16


@dataclass
class LossBreakdown:
    total: torch.Tensor
    per_channel: torch.Tensor
    skill_term: torch.Tensor
    spread_term: torch.Tensor

    def detached(self) -> dict:
        return {
            "total": float(self.total),
            "skill": float(self.skill_term),
            "spread": float(self.spread_term),
            "per_channel": [float(v) for v in self.per_channel],
        }


def channel_weights(cw, n_channels: int, like: torch.Tensor) -> torch.Tensor:
    if cw is None:
        return torch.ones(n_channels, dtype=like.dtype, device=like.device)
    w = torch.as_tensor(np.asarray(cw, dtype=np.float64), dtype=like.dtype, device=like.device)
    if w.shape != (n_channels,):
        raise ValueError(f"expected {n_channels} channel weights, got {tuple(w.shape)}")
    if torch.any(w < 0) or not torch.any(w > 0):
        raise ValueError("channel weights must be nonnegative with at least one positive entry")
    return w


def _area(weights, like: torch.Tensor) -> torch.Tensor:
    a = getattr(weights, "normalized", weights)
    a = torch.tensor(np.asarray(a, dtype=np.float64), dtype=like.dtype, device=like.device)
    if a.shape != like.shape[-2:-1]:
        raise ValueError(f"{a.shape[0]} area weights for {like.shape[-2]} latitude rows")
    return a[:, None]


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(getattr(x, "values", x), dtype=np.float64))


def _check_same(u, v):
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch {tuple(u.shape)} vs {tuple(v.shape)}")


def pointwise_l1(u: torch.Tensor, v: torch.Tensor, per_channel: bool = False) -> torch.Tensor:
    """|u - v| summed over the channel axis (or kept per channel)."""
    u, v = _t(u), _t(v)
    _check_same(u, v)
    d = (u - v).abs()
    return d if per_channel else d.sum(dim=-3)


def _reduce(field: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (C,): area-weighted spatial mean, then mean over leading axes."""
    per = (field * a).mean(dim=(-2, -1))
    return per.reshape(-1, per.shape[-1]).mean(dim=0)


def _combine(per_channel: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    return (per_channel * w).sum() / w.sum()


def weighted_mae(prediction: torch.Tensor, target: torch.Tensor, weights, cw=None) -> LossBreakdown:
    prediction, target = _t(prediction), _t(target)
    _check_same(prediction, target)
    a = _area(weights, prediction)
    w = channel_weights(cw, prediction.shape[-3], prediction)
    per = _reduce((prediction - target).abs(), a)
    total = _combine(per, w)
    return LossBreakdown(total, per, total, torch.zeros_like(total))


def _pairwise_spread(members: torch.Tensor) -> torch.Tensor:
    M = members.shape[0]
    acc = torch.zeros_like(members[0])
    for m in range(M):
        for n in range(m + 1, M):
            acc = acc + (members[m] - members[n]).abs()
    return 2 * acc / (M * (M - 1))


def _sorted_spread(members: torch.Tensor) -> torch.Tensor:
    # sum_{m<n} |x_(n) - x_(m)| = sum_i (2i - M + 1) x_(i) for ascending x_(i)
    M = members.shape[0]
    xs, _ = torch.sort(members, dim=0)
    coef = (2 * torch.arange(M, dtype=members.dtype, device=members.device) - M + 1)
    coef = coef.reshape(M, *([1] * (members.ndim - 1)))
    return 2 * (coef * xs).sum(dim=0) / (M * (M - 1))


def fair_crps(members: torch.Tensor, target: torch.Tensor, weights, cw=None, method: str = "auto") -> LossBreakdown:
    """Unbiased ensemble CRPS: skill - spread / 2 with the M(M-1) spread divisor.

    ``method="pairwise"`` differentiates through |x_m - x_n| directly (zero
    subgradient at ties); ``"sorted"`` is the O(M log M) form used for large
    evaluation ensembles.
    """
    members, target = _t(members), _t(target)
    if members.ndim < 4:
        raise ValueError("members must be (M, ..., C, H, W)")
    M = members.shape[0]
    if M < 2:
        raise ValueError(f"fair CRPS needs at least 2 members, got {M}")
    _check_same(members[0], target)
    if method == "auto":
        method = "pairwise" if M <= PAIRWISE_MAX_MEMBERS else "sorted"
    a = _area(weights, target)
    w = channel_weights(cw, target.shape[-3], target)
    skill = (members - target.unsqueeze(0)).abs().mean(dim=0)
    if method == "pairwise":
        spread = _pairwise_spread(members)
    elif method == "sorted":
        spread = _sorted_spread(members)
    else:
        raise ValueError(f"unknown method {method!r}")
    skill_c = _reduce(skill, a)
    spread_c = _reduce(spread, a)
    per = skill_c - 0.5 * spread_c
    return LossBreakdown(_combine(per, w), per, _combine(skill_c, w), _combine(spread_c, w))
