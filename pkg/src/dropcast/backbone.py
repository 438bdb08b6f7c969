"""DhariwalUnet-style encoder/decoder for lat-lon grids.

Departures from the image-diffusion original:

* every 3x3 convolution pads circularly in longitude and with zeros in latitude;
* decoder upsampling is a bilinear resize to the exact skip-connection shape
  (longitude interpolation wraps around), so odd grid sizes work;
* no timestep embedding and no adaptive normalization, except in the
  ``adaln_noise`` ablation mode where a noise vector modulates every residual
  block through zero-initialized projections;
* stochasticity comes from dropout layers whose masks are keyed by a per-row
  member seed instead of the global RNG.
"""

from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .grid import GridSpec

_MASK64 = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stream_key(*counters: int) -> int:
    """Counter-based 63-bit key from integers, e.g. (member_seed, step, layer)."""
    h = 0
    for c in counters:
        h = _splitmix64(h ^ (int(c) & _MASK64))
    return h >> 1


class StochasticMode(str, enum.Enum):
    DROPOUT = "dropout"
    ADALN_NOISE = "adaln_noise"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int
    out_channels: int
    base_width: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 3, 4)
    blocks_per_resolution: int = 2
    attention_levels: tuple[int, ...] = (0, 1)  # 0 is the coarsest resolution
    dropout_rate: float = 0.1
    stochastic_mode: str = "dropout"
    noise_dim: int = 32
    head_width: int = 64
    emb_multiplier: int = 4
    max_groups: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        object.__setattr__(self, "attention_levels", tuple(sorted(int(a) for a in self.attention_levels)))
        object.__setattr__(self, "stochastic_mode", StochasticMode(self.stochastic_mode).value)
        n = len(self.channel_multipliers)
        if n < 1:
            raise ValueError("need at least one resolution level")
        if any(a < 0 or a >= n for a in self.attention_levels):
            raise ValueError(f"attention_levels {self.attention_levels} outside 0..{n - 1}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_width < 1 or self.blocks_per_resolution < 1:
            raise ValueError("channel counts and blocks_per_resolution must be positive")
        if self.stochastic_mode == "adaln_noise" and self.noise_dim < 1:
            raise ValueError("adaln_noise mode needs noise_dim >= 1")

    @property
    def n_levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def total_stride(self) -> int:
        return 2 ** (self.n_levels - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


@dataclass(frozen=True)
class StochasticTag:
    """Identifies one ensemble member's random stream.

    ``step`` advances the stream during autoregressive rollouts.
    """

    member_seed: int = 0
    enabled: bool = True
    step: int = 0

    @property
    def key(self) -> int:
        return stream_key(self.member_seed, self.step)


def _num_groups(channels: int, max_groups: int = 32) -> int:
    g = min(max_groups, channels)
    while channels % g:
        g -= 1
    return g


def lonlat_pad(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Circular padding along longitude (last dim), zero padding along latitude."""
    if pad == 0:
        return x
    x = torch.cat([x[..., -pad:], x, x[..., :pad]], dim=-1)
    return F.pad(x, (0, 0, pad, pad))


def resize_lonlat(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize; edge-clamped in latitude, periodic in longitude."""
    H, W = size
    w_in = x.shape[-1]
    if W == 2 * w_in:
        # pad one column each side, interpolate, crop: identical to periodic interpolation
        x = torch.cat([x[..., -1:], x, x[..., :1]], dim=-1)
        x = F.interpolate(x, size=(H, W + 4), mode="bilinear", align_corners=False)
        return x[..., 2:-2]
    if x.shape[-2] != H:
        x = F.interpolate(x, size=(H, w_in), mode="bilinear", align_corners=False)
    if w_in != W:
        src = (torch.arange(W, dtype=torch.float64) + 0.5) * (w_in / W) - 0.5
        lo = torch.floor(src)
        frac = (src - lo).to(x.dtype)
        i0 = lo.long() % w_in
        i1 = (i0 + 1) % w_in
        x = x.index_select(-1, i0) * (1 - frac) + x.index_select(-1, i1) * frac
    return x


def downsample(x: torch.Tensor) -> torch.Tensor:
    return F.avg_pool2d(x, kernel_size=2, stride=2, ceil_mode=True)


class _RowState:
    """Per-forward stochastic context shared by all layers of one model."""

    def __init__(self):
        self.keys: list[int] | None = None
        self.noise: torch.Tensor | None = None


class GroupNorm(nn.GroupNorm):
    """GroupNorm without torch's "more than one value per channel" guard.

    A coarsest level of 1x1 with one channel per group is legal on tiny grids;
    normalizing a single value simply gives the bias.
    """

    def forward(self, x):
        return torch.group_norm(x, self.num_groups, self.weight, self.bias, self.eps, False)


class LonLatConv(nn.Module):
    def __init__(self, cin: int, cout: int, kernel: int, zero_init: bool = False):
        super().__init__()
        self.kernel = kernel
        self.weight = nn.Parameter(torch.empty(cout, cin, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(cout))
        if zero_init:
            nn.init.zeros_(self.weight)
            nn.init.zeros_(self.bias)
        else:
            # EDM "kaiming_uniform" with init_weight = init_bias = sqrt(1/3)
            bound = math.sqrt(1 / (cin * kernel * kernel))
            nn.init.uniform_(self.weight, -bound, bound)
            nn.init.uniform_(self.bias, -bound, bound)

    def forward(self, x):
        return F.conv2d(lonlat_pad(x, self.kernel // 2), self.weight, self.bias)


class SeededDropout(nn.Module):
    """Dropout whose mask for batch row b depends only on (key_b, layer_id)."""

    def __init__(self, p: float, layer_id: int, ctx: _RowState):
        super().__init__()
        self.p = p
        self.layer_id = layer_id
        self._ctx = [ctx]  # list wrapper keeps ctx out of the module tree

    def forward(self, x):
        keys = self._ctx[0].keys
        if self.p == 0 or keys is None:
            return x
        if len(keys) != x.shape[0]:
            raise ValueError(f"{len(keys)} stochastic keys for batch of {x.shape[0]}")
        masks = []
        for k in keys:
            g = torch.Generator().manual_seed(stream_key(k, self.layer_id))
            masks.append(torch.rand(x.shape[1:], generator=g) >= self.p)
        mask = torch.stack(masks).to(x.dtype)
        return x * mask / (1 - self.p)


class UNetBlock(nn.Module):
    def __init__(self, cin, cout, *, ctx: _RowState, layer_id: int, emb_channels: int = 0, up=False, down=False,
                 attention=False, head_width=64, dropout=0.0, max_groups=32, skip_scale=1.0):
        super().__init__()
        assert not (up and down)
        self.in_channels = cin
        self.out_channels = cout
        self.up = up
        self.down = down
        self.skip_scale = skip_scale
        self.num_heads = max(1, cout // head_width) if attention else 0

        self.norm0 = GroupNorm(_num_groups(cin, max_groups), cin, eps=1e-5)
        self.conv0 = LonLatConv(cin, cout, 3)
        self.affine = nn.Linear(emb_channels, 2 * cout) if emb_channels else None
        if self.affine is not None:
            nn.init.zeros_(self.affine.weight)
            nn.init.zeros_(self.affine.bias)
        self.norm1 = GroupNorm(_num_groups(cout, max_groups), cout, eps=1e-5)
        self.dropout = SeededDropout(dropout, layer_id, ctx)
        self.conv1 = LonLatConv(cout, cout, 3, zero_init=True)
        self.skip = LonLatConv(cin, cout, 1) if cin != cout else None
        if self.num_heads:
            self.norm2 = GroupNorm(_num_groups(cout, max_groups), cout, eps=1e-5)
            self.qkv = LonLatConv(cout, 3 * cout, 1)
            self.proj = LonLatConv(cout, cout, 1, zero_init=True)

    def _resample(self, x, size):
        if self.down:
            return downsample(x)
        if self.up:
            return resize_lonlat(x, size)
        return x

    def forward(self, x, emb=None, size=None):
        orig = x
        x = self.conv0(self._resample(F.silu(self.norm0(x)), size))
        if self.affine is not None and emb is not None:
            scale, shift = self.affine(emb)[:, :, None, None].to(x.dtype).chunk(2, dim=1)
            x = F.silu(torch.addcmul(shift, self.norm1(x), scale + 1))
        else:
            x = F.silu(self.norm1(x))
        x = self.conv1(self.dropout(x))
        skip = self._resample(orig, size)
        if self.skip is not None:
            skip = self.skip(skip)
        x = (x + skip) * self.skip_scale

        if self.num_heads:
            B, C, H, W = x.shape
            q, k, v = self.qkv(self.norm2(x)).reshape(B * self.num_heads, C // self.num_heads, 3, H * W).unbind(2)
            w = torch.einsum("ncq,nck->nqk", q, k / math.sqrt(k.shape[1])).softmax(dim=2)
            a = torch.einsum("nqk,nck->ncq", w, v)
            x = (self.proj(a.reshape(B, C, H, W)) + x) * self.skip_scale
        return x


class UNet(nn.Module):
    def __init__(self, config: ModelConfig, grid: GridSpec | None = None):
        super().__init__()
        self.config = config
        self.grid = grid
        if grid is not None:
            check_grid(config, grid)
        mode = config.stochastic_mode
        self._ctx = _RowState()
        dropout = config.dropout_rate if mode == "dropout" else 0.0
        base = config.base_width
        n = config.n_levels
        emb_channels = 0
        self.map_layer0 = self.map_layer1 = None
        if mode == "adaln_noise":
            emb_channels = base * config.emb_multiplier
            self.map_layer0 = nn.Linear(config.noise_dim, emb_channels)
            self.map_layer1 = nn.Linear(emb_channels, emb_channels)
        counter = iter(range(10_000))
        attn = {n - 1 - a for a in config.attention_levels}  # fine-first level indices

        def block(cin, cout, **kw):
            return UNetBlock(cin, cout, ctx=self._ctx, layer_id=next(counter), emb_channels=emb_channels,
                             head_width=config.head_width, dropout=dropout, max_groups=config.max_groups, **kw)

        self.enc = nn.ModuleDict()
        cout = config.in_channels
        for level, mult in enumerate(config.channel_multipliers):
            if level == 0:
                cin, cout = cout, base * mult
                self.enc[f"l{level}_conv"] = LonLatConv(cin, cout, 3)
            else:
                self.enc[f"l{level}_down"] = block(cout, cout, down=True)
            for idx in range(config.blocks_per_resolution):
                cin, cout = cout, base * mult
                self.enc[f"l{level}_block{idx}"] = block(cin, cout, attention=level in attn)
        skips = [b.out_channels if isinstance(b, UNetBlock) else b.weight.shape[0] for b in self.enc.values()]

        self.dec = nn.ModuleDict()
        for level, mult in reversed(list(enumerate(config.channel_multipliers))):
            if level == n - 1:
                self.dec[f"l{level}_in0"] = block(cout, cout, attention=level in attn)
                self.dec[f"l{level}_in1"] = block(cout, cout)
            else:
                self.dec[f"l{level}_up"] = block(cout, cout, up=True)
            for idx in range(config.blocks_per_resolution + 1):
                cin, cout = cout + skips.pop(), base * mult
                self.dec[f"l{level}_block{idx}"] = block(cin, cout, attention=level in attn)
        self.out_norm = GroupNorm(_num_groups(cout, config.max_groups), cout, eps=1e-5)
        self.out_conv = LonLatConv(cout, config.out_channels, 3, zero_init=True)
        self.register_buffer("residual_scale", torch.ones(config.out_channels))

    # -- stochastic context ------------------------------------------------------------

    def _noise(self, keys, batch, dtype, device):
        noise = torch.zeros(batch, self.config.noise_dim, dtype=dtype, device=device)
        if keys is not None:
            for b, k in enumerate(keys):
                g = torch.Generator().manual_seed(stream_key(k, 0xADA1))
                noise[b] = torch.randn(self.config.noise_dim, generator=g).to(dtype)
        return noise

    def forward(self, x: torch.Tensor, keys: Sequence[int] | None = None) -> torch.Tensor:
        """Residual prediction for a batch; ``keys`` (one per row) switch stochasticity on."""
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ValueError(f"expected (B, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}")
        if self.grid is not None and tuple(x.shape[-2:]) != self.grid.shape:
            raise ValueError(f"input grid {tuple(x.shape[-2:])} != model grid {self.grid.shape}")
        if min(x.shape[-2:]) < self.config.total_stride:
            raise ValueError(f"grid {tuple(x.shape[-2:])} smaller than total stride {self.config.total_stride}")
        keys = None if keys is None else [int(k) for k in keys]
        emb = None
        if self.map_layer0 is not None:
            emb = self._noise(keys, x.shape[0], x.dtype, x.device)
            emb = F.silu(self.map_layer1(F.silu(self.map_layer0(emb))))
        self._ctx.keys = keys if self.config.stochastic_mode == "dropout" else None
        try:
            skips = []
            for blk in self.enc.values():
                x = blk(x, emb) if isinstance(blk, UNetBlock) else blk(x)
                skips.append(x)
            for blk in self.dec.values():
                if x.shape[1] != blk.in_channels:
                    x = torch.cat([x, skips.pop()], dim=1)
                x = blk(x, emb, size=skips[-1].shape[-2:] if blk.up else None)
            x = self.out_conv(F.silu(self.out_norm(x)))
        finally:
            self._ctx.keys = None
        return x * self.residual_scale[:, None, None].to(x.dtype)


def check_grid(config: ModelConfig, grid: GridSpec):
    if min(grid.shape) < config.total_stride:
        raise ValueError(f"grid {grid.shape} smaller than total downsampling factor {config.total_stride}")


def build(config: ModelConfig, grid: GridSpec | None = None, seed: int | None = 0, device=None) -> UNet:
    """Instantiate the network. ``device="meta"`` gives a shape-only model."""
    if seed is not None and device != "meta":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return UNet(config, grid)
    if device == "meta":
        with torch.device("meta"):
            return UNet(config, grid)
    return UNet(config, grid)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: UNet, window, tag: StochasticTag | None = None) -> np.ndarray:
    """Single-window residual prediction (normalized units) as a (C, H, W) array."""
    x = torch.as_tensor(np.asarray(window.model_input)[None], dtype=next(model.parameters()).dtype)
    keys = [tag.key] if tag is not None and tag.enabled else None
    with torch.no_grad():
        return model(x, keys)[0].cpu().numpy()


def paper_config() -> ModelConfig:
    """Full-size configuration: 172 inputs, 83 outputs, width 320, 4 blocks/level."""
    return ModelConfig(in_channels=172, out_channels=83, base_width=320, channel_multipliers=(1, 2, 3, 4),
                       blocks_per_resolution=4, attention_levels=(0, 1), dropout_rate=0.1)


DESIGN_RECORD = {
    "dropout_placement": "inside each residual block, after norm1+SiLU, before conv1",
    "attention": "multi-head self-attention over flattened positions, no positional encoding",
    "head_width": 64,
    "latitude_padding": "zeros",
    "longitude_padding": "circular",
    "normalization": "GroupNorm, <=32 groups (largest divisor of channels)",
    "downsampling": "2x2 average pooling, ceil mode",
    "upsampling": "bilinear resize to skip shape, periodic in longitude",
    "mask_streams": "splitmix64(member key, layer id) seeds a per-row torch.Generator",
    "adaln": "noise -> 2-layer SiLU MLP -> zero-init per-block scale/shift on norm1; dropout off",
}
