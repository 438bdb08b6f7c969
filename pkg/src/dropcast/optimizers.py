"""Muon for matrix-shaped parameters, AdamW for the rest, plus schedules and EMA."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import torch

logger = logging.getLogger(__name__)

NS_COEFFICIENTS = (3.4445, -4.7750, 2.0315)
LOW_PRECISION_NUMEL = 1_000_000


@dataclass(frozen=True)
class OptimConfig:
    muon_peak_lr: float = 3e-3
    adamw_peak_lr: float = 3e-4
    muon_weight_decay: float = 0.1
    adamw_weight_decay: float = 0.03
    warmup_steps: int = 1500
    total_steps: int = 100_000
    momentum: float = 0.95
    nesterov: bool = True
    ns_iterations: int = 5
    ema_decay: float = 0.9999
    adam_betas: tuple[float, float] = (0.9, 0.95)
    adam_eps: float = 1e-8
    use_muon: bool = True
    adamw_for_output: bool = False

    def __post_init__(self):
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))
        if self.muon_peak_lr <= 0 or self.adamw_peak_lr <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.ns_iterations < 1:
            raise ValueError("ns_iterations must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> OptimConfig:
        return cls(**d)


def stage1_config(**overrides) -> OptimConfig:
    return OptimConfig(**{"muon_peak_lr": 3e-3, "adamw_peak_lr": 3e-4, **overrides})


def stage2_config(**overrides) -> OptimConfig:
    return OptimConfig(**{"muon_peak_lr": 7e-3, "adamw_peak_lr": 7e-5, **overrides})


def lr_factor(step_index: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup 0 -> 1 over ``warmup_steps``, then cosine 1 -> 0 at ``total_steps``."""
    if step_index < warmup_steps:
        return step_index / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    progress = min(1.0, (step_index - warmup_steps) / (total_steps - warmup_steps))
    return 0.5 * (1 + math.cos(math.pi * progress))


def lr_at(step_index: int, config: OptimConfig, peak: float | None = None) -> float:
    peak = config.muon_peak_lr if peak is None else peak
    return peak * lr_factor(step_index, config.warmup_steps, config.total_steps)


def newton_schulz_orthogonalize(G: torch.Tensor, iterations: int = 5, coefficients=NS_COEFFICIENTS) -> torch.Tensor:
    """Approximate polar factor U V^T of a matrix via the quintic Newton-Schulz map.

    The iteration does not converge to exactly orthogonal output: singular
    values land in a loose band around 1 (roughly 0.7 to 1.2).
    """
    if G.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {tuple(G.shape)}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    norm = torch.linalg.matrix_norm(G)
    if norm == 0:
        logger.debug("newton_schulz_orthogonalize: zero matrix, returning zeros")
        return torch.zeros_like(G)
    a, b, c = coefficients
    X = G.bfloat16() if G.numel() > LOW_PRECISION_NUMEL else G
    transposed = X.shape[0] > X.shape[1]
    if transposed:
        X = X.T
    X = X / (norm.to(X.dtype) + 1e-7)
    for _ in range(iterations):
        A = X @ X.T
        X = a * X + (b * A + c * A @ A) @ X
    if transposed:
        X = X.T
    return X.to(G.dtype)


class HybridMuonAdamW:
    """Muon on >=2-D tensors (kernels flattened to out x rest), AdamW on the rest.

    ``step(step_index)`` sets both learning rates from the shared warmup+cosine
    schedule before updating.
    """

    def __init__(self, named_params, config: OptimConfig, adamw_names=()):
        self.config = config
        self.params: dict[str, torch.nn.Parameter] = {}
        self.kind: dict[str, str] = {}
        for name, p in named_params:
            if not p.requires_grad:
                continue
            self.params[name] = p
            use_muon = config.use_muon and p.ndim >= 2 and name not in set(adamw_names)
            self.kind[name] = "muon" if use_muon else "adamw"
        self.state: dict[str, dict[str, torch.Tensor]] = {}
        self.step_count = 0
        self.zero_updates = 0

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def learning_rates(self, step_index: int) -> dict[str, float]:
        f = lr_factor(step_index, self.config.warmup_steps, self.config.total_steps)
        return {"muon": self.config.muon_peak_lr * f, "adamw": self.config.adamw_peak_lr * f}

    @torch.no_grad()
    def step(self, step_index: int | None = None):
        cfg = self.config
        step_index = self.step_count if step_index is None else step_index
        lrs = self.learning_rates(step_index)
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if not torch.all(torch.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if self.kind[name] == "muon":
                self._muon(name, p, g, lrs["muon"])
            else:
                self._adamw(name, p, g, lrs["adamw"])
        self.step_count += 1

    def _muon(self, name, p, g, lr):
        cfg = self.config
        st = self.state.setdefault(name, {})
        buf = st.get("momentum_buffer")
        if buf is None:
            buf = st["momentum_buffer"] = torch.zeros_like(g)
        buf.lerp_(g, 1 - cfg.momentum)
        update = g.lerp(buf, cfg.momentum) if cfg.nesterov else buf
        mat = update.reshape(update.shape[0], -1)
        ortho = newton_schulz_orthogonalize(mat, cfg.ns_iterations)
        if not torch.any(ortho):
            self.zero_updates += 1
        rows, cols = mat.shape
        if cfg.muon_weight_decay:
            p.mul_(1 - lr * cfg.muon_weight_decay)
        p.add_(ortho.reshape(p.shape), alpha=-lr * max(1.0, rows / cols) ** 0.5)

    def _adamw(self, name, p, g, lr):
        cfg = self.config
        b1, b2 = cfg.adam_betas
        st = self.state.setdefault(name, {})
        if "exp_avg" not in st:
            st["exp_avg"] = torch.zeros_like(p)
            st["exp_avg_sq"] = torch.zeros_like(p)
            st["step"] = torch.zeros((), dtype=torch.float64)
        st["step"] += 1
        t = float(st["step"])
        st["exp_avg"].lerp_(g, 1 - b1)
        st["exp_avg_sq"].mul_(b2).addcmul_(g, g, value=1 - b2)
        if cfg.adamw_weight_decay:
            p.mul_(1 - lr * cfg.adamw_weight_decay)
        denom = (st["exp_avg_sq"] / (1 - b2 ** t)).sqrt_().add_(cfg.adam_eps)
        p.addcdiv_(st["exp_avg"], denom, value=-lr / (1 - b1 ** t))

    # -- serialization ---------------------------------------------------------------

    def state_arrays(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, st in self.state.items():
            for key, v in st.items():
                out[f"{name}/{key}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, torch.Tensor], step_count: int):
        self.state = {}
        for full, v in arrays.items():
            name, key = full.rsplit("/", 1)
            if name not in self.params:
                raise KeyError(f"optimizer state for unknown parameter {name!r}")
            self.state.setdefault(name, {})[key] = v.clone()
        self.step_count = step_count


@torch.no_grad()
def ema_update(ema_params, current_params, decay: float):
    """In place: ema <- decay * ema + (1 - decay) * current. Returns ``ema_params``."""
    if isinstance(ema_params, dict):
        pairs = [(ema_params[k], current_params[k]) for k in ema_params]
    else:
        pairs = list(zip(ema_params, current_params))
    for e, c in pairs:
        if e.shape != c.shape:
            raise ValueError(f"EMA shape mismatch {tuple(e.shape)} vs {tuple(c.shape)}")
        if e.is_floating_point():
            e.mul_(decay).add_(c, alpha=1 - decay)
        else:
            e.copy_(c)
    return ema_params
