"""ADM-style U-Net noise predictor with a numbered, tappable block registry.

Block numbering follows forward execution order: the input stem, then every
encoder residual / residual+attention / downsampling residual block, then the
bottleneck (res, attention, res counted as one block), then every decoder
block (an upsampling residual folds into the last block of its level).
For the 256x256 unconditional reference layout this yields exactly 37 blocks.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError

BLOCK_KINDS = ("stem", "residual", "residual_attention", "down_residual",
               "up_residual", "bottleneck")


@dataclass(frozen=True)
class BlockSpec:
    index: int
    kind: str
    out_channels: int
    spatial_divisor: int
    stage: str  # encoder / bottleneck / decoder

    def output_shape(self, resolution: int) -> tuple[int, int, int]:
        side = resolution // self.spatial_divisor
        return (self.out_channels, side, side)


@dataclass(frozen=True)
class BlockRegistry:
    blocks: tuple[BlockSpec, ...]

    def __post_init__(self):
        for i, blk in enumerate(self.blocks, start=1):
            if blk.index != i:
                raise InvalidConfigError(f"block indices must be consecutive from 1; "
                                         f"position {i} holds index {blk.index}")
            d = blk.spatial_divisor
            if d < 1 or d & (d - 1):
                raise InvalidConfigError(f"block {i}: spatial divisor {d} is not a power of two")
            if blk.kind not in BLOCK_KINDS:
                raise InvalidConfigError(f"block {i}: unknown kind {blk.kind!r}")

    def __len__(self):
        return len(self.blocks)

    def __getitem__(self, b: int) -> BlockSpec:
        if not isinstance(b, int) or not 1 <= b <= len(self.blocks):
            raise InvalidInputError(f"block index {b!r} not in registry [1, {len(self.blocks)}]")
        return self.blocks[b - 1]

    def __iter__(self):
        return iter(self.blocks)

    @property
    def indices(self) -> list[int]:
        return [blk.index for blk in self.blocks]

    @property
    def bottleneck(self) -> int:
        return next(blk.index for blk in self.blocks if blk.kind == "bottleneck")

    def to_list(self) -> list[dict]:
        return [asdict(blk) for blk in self.blocks]


@dataclass(frozen=True)
class BackboneConfig:
    resolution: int = 32
    in_channels: int = 3
    base_channels: int = 64
    channel_multipliers: tuple[int, ...] = (1, 2, 4)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (8,)
    time_embed_dim: int | None = None  # defaults to 4 * base_channels
    head_channels: int = 64
    norm_groups: int = 32

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        object.__setattr__(self, "attention_resolutions",
                           tuple(sorted(set(self.attention_resolutions), reverse=True)))
        if self.time_embed_dim is None:
            object.__setattr__(self, "time_embed_dim", 4 * self.base_channels)
        for name in ("resolution", "in_channels", "base_channels", "num_res_blocks",
                     "time_embed_dim", "head_channels", "norm_groups"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise InvalidConfigError(f"{name} must be a positive integer, got {v!r}")
        if not self.channel_multipliers or any(m < 1 for m in self.channel_multipliers):
            raise InvalidConfigError("channel_multipliers must be non-empty and positive")
        factor = 2 ** (len(self.channel_multipliers) - 1)
        if self.resolution % factor:
            raise InvalidConfigError(
                f"resolution {self.resolution} not divisible by 2^(levels-1) = {factor}")
        for m in self.channel_multipliers:
            ch = m * self.base_channels
            if ch % min(self.norm_groups, ch):
                raise InvalidConfigError(f"{ch} channels not divisible into norm groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_multipliers"] = list(self.channel_multipliers)
        d["attention_resolutions"] = list(self.attention_resolutions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown backbone keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def reference_config() -> BackboneConfig:
    """The 256x256 unconditional ADM layout (37 blocks)."""
    return BackboneConfig(resolution=256, base_channels=256,
                          channel_multipliers=(1, 1, 2, 2, 4, 4), num_res_blocks=2,
                          attention_resolutions=(32, 16, 8), head_channels=64)


def toy_config() -> BackboneConfig:
    return BackboneConfig()


def _layout(cfg: BackboneConfig):
    """Yield (kind, stage, in_ch, out_ch, divisor, attn, resample) per block, in order.

    ``in_ch`` for decoder blocks already includes the concatenated skip.
    This single walk drives both the registry and the module construction.
    """
    base = cfg.base_channels
    levels = len(cfg.channel_multipliers)
    ch = base
    div = 1
    skips = [ch]
    yield ("stem", "encoder", cfg.in_channels, ch, div, False, None)
    for lvl, mult in enumerate(cfg.channel_multipliers):
        for _ in range(cfg.num_res_blocks):
            out = mult * base
            attn = cfg.resolution // div in cfg.attention_resolutions
            yield ("residual_attention" if attn else "residual", "encoder",
                   ch, out, div, attn, None)
            ch = out
            skips.append(ch)
        if lvl != levels - 1:
            div *= 2
            yield ("down_residual", "encoder", ch, ch, div, False, "down")
            skips.append(ch)
    yield ("bottleneck", "bottleneck", ch, ch, div, True, None)
    for lvl, mult in reversed(list(enumerate(cfg.channel_multipliers))):
        for i in range(cfg.num_res_blocks + 1):
            skip = skips.pop()
            out = mult * base
            attn = cfg.resolution // div in cfg.attention_resolutions
            up = lvl != 0 and i == cfg.num_res_blocks
            kind = "up_residual" if up else ("residual_attention" if attn else "residual")
            yield (kind, "decoder", ch + skip, out, div // 2 if up else div, attn,
                   "up" if up else None)
            ch = out
            if up:
                div //= 2


def build_registry(cfg: BackboneConfig) -> BlockRegistry:
    """Derive the block registry from a config without allocating weights."""
    blocks = [BlockSpec(index=i, kind=kind, out_channels=out, spatial_divisor=div, stage=stage)
              for i, (kind, stage, _in, out, div, _a, _r) in enumerate(_layout(cfg), start=1)]
    return BlockRegistry(tuple(blocks))


def timestep_embedding(t: torch.Tensor, dim: int, max_period: int = 10000) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape [N, dim]."""
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def _norm(ch: int, groups: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(groups, ch), ch)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class ResBlock(nn.Module):
    """BigGAN-style residual block with scale-shift time conditioning."""

    def __init__(self, in_ch, out_ch, emb_dim, groups, resample=None):
        super().__init__()
        self.resample = resample
        self.in_norm = _norm(in_ch, groups)
        self.in_conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, 2 * out_ch)
        self.out_norm = _norm(out_ch, groups)
        self.out_conv = _zero(nn.Conv2d(out_ch, out_ch, 3, padding=1))
        self.skip = nn.Identity() if in_ch == out_ch else nn.Conv2d(in_ch, out_ch, 1)

    def _resample(self, x):
        if self.resample == "down":
            return F.avg_pool2d(x, 2)
        if self.resample == "up":
            return F.interpolate(x, scale_factor=2, mode="nearest")
        return x

    def forward(self, x, emb):
        h = F.silu(self.in_norm(x))
        h = self._resample(h)
        x = self._resample(x)
        h = self.in_conv(h)
        scale, shift = self.emb_proj(F.silu(emb))[..., None, None].chunk(2, dim=1)
        h = self.out_norm(h) * (1 + scale) + shift
        h = self.out_conv(F.silu(h))
        return self.skip(x) + h


class AttentionBlock(nn.Module):
    """Spatial multi-head self-attention with a residual connection."""

    def __init__(self, ch, head_channels, groups):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = _norm(ch, groups)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = _zero(nn.Conv1d(ch, ch, 1))

    def forward(self, x, emb=None):
        n, c, h, w = x.shape
        qkv = self.qkv(self.norm(x).reshape(n, c, h * w))
        q, k, v = qkv.reshape(n * self.heads, 3 * c // self.heads, h * w).chunk(3, dim=1)
        scale = (c // self.heads) ** -0.25
        weight = torch.softmax(torch.einsum("bct,bcs->bts", q * scale, k * scale), dim=-1)
        out = torch.einsum("bts,bcs->bct", weight, v).reshape(n, c, h * w)
        return x + self.proj(out).reshape(n, c, h, w)


class Block(nn.Module):
    """One numbered unit: a sequence of layers whose output is the tap point."""

    def __init__(self, layers: Iterable[nn.Module]):
        super().__init__()
        self.layers = nn.ModuleList(layers)

    def forward(self, x, emb):
        for layer in self.layers:
            x = layer(x, emb) if isinstance(layer, (ResBlock, AttentionBlock)) else layer(x)
        return x


class UNet(nn.Module):
    """Noise predictor eps(x_t, t) whose blocks follow :func:`build_registry`."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.config = cfg
        self.registry = build_registry(cfg)
        emb = cfg.time_embed_dim
        g = cfg.norm_groups
        self.time_embed = nn.Sequential(
            nn.Linear(cfg.base_channels, emb), nn.SiLU(), nn.Linear(emb, emb))
        blocks = []
        for kind, _stage, cin, cout, _div, attn, resample in _layout(cfg):
            if kind == "stem":
                layers = [nn.Conv2d(cin, cout, 3, padding=1)]
            elif kind == "down_residual":
                layers = [ResBlock(cin, cout, emb, g, resample="down")]
            elif kind == "bottleneck":
                layers = [ResBlock(cin, cout, emb, g), AttentionBlock(cout, cfg.head_channels, g),
                          ResBlock(cout, cout, emb, g)]
            else:
                layers = [ResBlock(cin, cout, emb, g)]
                if attn:
                    layers.append(AttentionBlock(cout, cfg.head_channels, g))
                if resample == "up":
                    layers.append(ResBlock(cout, cout, emb, g, resample="up"))
            blocks.append(Block(layers))
        self.blocks = nn.ModuleList(blocks)
        out_ch = self.registry.blocks[-1].out_channels
        self.out = nn.Sequential(_norm(out_ch, g), nn.SiLU(),
                                 _zero(nn.Conv2d(out_ch, cfg.in_channels, 3, padding=1)))

    def forward(self, x, t, taps: Iterable[int] | None = None):
        """Predict noise. With ``taps`` given, also return ``{b: activation}``."""
        wanted = set(taps) if taps is not None else set()
        for b in wanted:
            self.registry[b]  # raises on unknown index
        if x.shape[1:] != (self.config.in_channels, self.config.resolution,
                           self.config.resolution):
            raise InvalidInputError(f"expected input [N, {self.config.in_channels}, "
                                    f"{self.config.resolution}, {self.config.resolution}], "
                                    f"got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(x.shape[0])
        emb = self.time_embed(timestep_embedding(t, self.config.base_channels).to(x.dtype))
        acts = {}
        skips = []
        h = x
        for spec, block in zip(self.registry, self.blocks):
            if spec.stage == "decoder":
                h = torch.cat([h, skips.pop()], dim=1)
            h = block(h, emb)
            if spec.stage == "encoder":
                skips.append(h)
            if spec.index in wanted:
                acts[spec.index] = h
        eps = self.out(h)
        return (eps, acts) if taps is not None else eps


def set_deterministic(seed: int | None = None, enabled: bool = True) -> None:
    torch.use_deterministic_algorithms(enabled)
    if seed is not None:
        torch.manual_seed(seed)


def build_backbone(cfg: BackboneConfig, seed: int = 0) -> tuple[UNet, BlockRegistry]:
    """Instantiate a U-Net with weights drawn from a generator seeded by ``seed``."""
    state = torch.random.get_rng_state()
    torch.manual_seed(int(seed))
    try:
        model = UNet(cfg)
    finally:
        torch.random.set_rng_state(state)
    return model, model.registry


def forward_with_taps(model: UNet, x_t: torch.Tensor, t, taps: Iterable[int] = ()):
    """Return ``(eps_pred, {b: activation})``; tapping never alters ``eps_pred``."""
    return model(x_t, t, taps=set(taps))


def count_parameters(model: nn.Module, trainable_only: bool = False) -> int:
    """Total number of scalar parameters.

    Counting is mode-independent by default: freezing a model (``requires_grad``
    off) does not change its count unless ``trainable_only`` is requested.
    """
    return sum(p.numel() for p in model.parameters()
               if p.requires_grad or not trainable_only)


def weight_digest(model: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
