"""Classification heads on U-Net features: linear, MLP, CNN and attention.

Each family has a closed-form parameter count (:func:`head_param_count`)
that matches the built module exactly.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidConfigError, InvalidInputError

FAMILIES = ("linear", "mlp", "cnn", "attention")

# family -> (fields it may set, fields it must set); others stay at their defaults.
# An MLP with no hidden layers is allowed and is the linear head.
_FAMILY_FIELDS = {
    "linear": (set(), set()),
    "mlp": ({"hidden_sizes"}, set()),
    "cnn": ({"conv_channels"}, {"conv_channels"}),
    "attention": ({"num_blocks"}, {"num_blocks"}),
}
_OPTIONAL = {"hidden_sizes": (), "conv_channels": None, "num_blocks": None}


@dataclass(frozen=True)
class HeadConfig:
    family: str
    input_channels: int
    num_classes: int
    pool: int = 1
    hidden_sizes: tuple = ()
    conv_channels: tuple | None = None
    num_blocks: int | None = None
    token_grid: int = 8
    num_heads: int = 8
    ff_ratio: int = 4

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(self.hidden_sizes))
        if self.conv_channels is not None:
            object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown head family {self.family!r}")
        allowed, required = _FAMILY_FIELDS[self.family]
        for name, default in _OPTIONAL.items():
            value = getattr(self, name)
            if name in required and value is None:
                raise InvalidConfigError(f"{self.family} head requires {name}")
            if name not in allowed and value != default:
                raise InvalidConfigError(f"{name} is not used by the {self.family} head")
        dims = [self.input_channels, self.num_classes, self.pool, self.token_grid,
                self.num_heads, self.ff_ratio, *self.hidden_sizes]
        if self.conv_channels is not None:
            if len(self.conv_channels) != 2:
                raise InvalidConfigError("conv_channels must be a pair (c1, c2)")
            dims += list(self.conv_channels)
        if self.num_blocks is not None:
            dims.append(self.num_blocks)
        if any(not isinstance(d, int) or d < 1 for d in dims):
            raise InvalidConfigError(f"all head dimensions must be positive integers: {self}")
        if self.family == "attention" and self.input_channels % self.num_heads:
            raise InvalidConfigError(
                f"{self.input_channels} channels not divisible by {self.num_heads} heads")

    @property
    def flat_input(self) -> bool:
        return self.family in ("linear", "mlp")

    @property
    def feature_dim(self) -> int:
        return self.input_channels * self.pool * self.pool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        if self.conv_channels is not None:
            d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HeadConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfigError(f"unknown head keys: {sorted(unknown)}")
        return cls(**d)


class MLPHead(nn.Module):
    def __init__(self, dims):
        super().__init__()
        layers = []
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(a, b))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        self.classifier = layers[-1]

    def forward(self, x):
        return self.net(x)


class CNNHead(nn.Module):
    """Two (2x2 conv, 2x2 max-pool) stages, 2x2 adaptive average pool, linear."""

    min_side = 7

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        c1, c2 = cfg.conv_channels
        self.conv1 = nn.Conv2d(cfg.input_channels, c1, 2)
        self.conv2 = nn.Conv2d(c1, c2, 2)
        self.classifier = nn.Linear(c2 * 4, cfg.num_classes)

    def features(self, x):
        x = F.max_pool2d(F.relu(self.conv1(x)), 2)
        x = F.max_pool2d(F.relu(self.conv2(x)), 2)
        return F.adaptive_avg_pool2d(x, 2).flatten(1)

    def forward(self, x):
        return self.classifier(self.features(x))


class TransformerBlock(nn.Module):
    """Pre-norm block: LN -> multi-head self-attention, LN -> MLP, both residual."""

    def __init__(self, dim, heads, ff_ratio):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, ff_ratio * dim), nn.GELU(),
                                 nn.Linear(ff_ratio * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class AttentionHead(nn.Module):
    """Pool to a token grid, prepend a CLS token, run transformer blocks, classify CLS."""

    def __init__(self, cfg: HeadConfig):
        super().__init__()
        c, g = cfg.input_channels, cfg.token_grid
        self.grid = g
        self.cls_token = nn.Parameter(torch.zeros(1, 1, c))
        self.pos_embed = nn.Parameter(torch.zeros(1, g * g + 1, c))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)
        self.blocks = nn.ModuleList(TransformerBlock(c, cfg.num_heads, cfg.ff_ratio)
                                    for _ in range(cfg.num_blocks))
        self.norm = nn.LayerNorm(c)
        self.classifier = nn.Linear(c, cfg.num_classes)

    def tokens(self, x):
        if x.shape[-2:] != (self.grid, self.grid):
            x = F.adaptive_avg_pool2d(x, self.grid)
        return x.flatten(2).transpose(1, 2)  # [N, g*g, C]

    def forward(self, x):
        tok = self.tokens(x)
        tok = torch.cat([self.cls_token.expand(tok.shape[0], -1, -1), tok], dim=1)
        tok = tok + self.pos_embed
        for blk in self.blocks:
            tok = blk(tok)
        return self.classifier(self.norm(tok[:, 0]))


class Head(nn.Module):
    """Wraps a family module and validates the incoming feature shape."""

    def __init__(self, cfg: HeadConfig, body: nn.Module):
        super().__init__()
        self.config = cfg
        self.body = body

    @property
    def classifier(self) -> nn.Linear:
        return self.body.classifier

    def forward(self, x):
        return self.body(x)


def build_head(cfg: HeadConfig, seed: int = 0, zero_init: bool = False) -> Head:
    """Instantiate a head with weights drawn under ``seed``.

    With ``zero_init`` the final classifier starts at zero, so the initial
    logits are all zero (uniform softmax).
    """
    state = torch.random.get_rng_state()
    torch.manual_seed(int(seed))
    try:
        if cfg.family == "linear":
            body = MLPHead([cfg.feature_dim, cfg.num_classes])
        elif cfg.family == "mlp":
            body = MLPHead([cfg.feature_dim, *cfg.hidden_sizes, cfg.num_classes])
        elif cfg.family == "cnn":
            body = CNNHead(cfg)
        else:
            body = AttentionHead(cfg)
    finally:
        torch.random.set_rng_state(state)
    head = Head(cfg, body)
    if zero_init:
        nn.init.zeros_(head.classifier.weight)
        nn.init.zeros_(head.classifier.bias)
    return head


def _affine(a: int, b: int) -> int:
    return a * b + b


def head_param_count(cfg: HeadConfig) -> int:
    """Closed-form parameter count of :func:`build_head` for ``cfg``."""
    k = cfg.num_classes
    if cfg.family in ("linear", "mlp"):
        dims = [cfg.feature_dim, *cfg.hidden_sizes, k]
        return sum(_affine(a, b) for a, b in zip(dims[:-1], dims[1:]))
    c = cfg.input_channels
    if cfg.family == "cnn":
        c1, c2 = cfg.conv_channels
        return (4 * c * c1 + c1) + (4 * c1 * c2 + c2) + _affine(4 * c2, k)
    g, r = cfg.token_grid, cfg.ff_ratio
    per_block = (2 * c            # norm1
                 + 3 * c * c + 3 * c + c * c + c   # qkv in-proj, out-proj
                 + 2 * c          # norm2
                 + _affine(c, r * c) + _affine(r * c, c))
    return c + (g * g + 1) * c + cfg.num_blocks * per_block + 2 * c + _affine(c, k)


def head_forward(head: Head, x: torch.Tensor) -> torch.Tensor:
    """Class logits ``[N, k]``; rejects inputs of the wrong layout."""
    cfg = head.config
    if cfg.flat_input:
        if x.dim() != 2 or x.shape[1] != cfg.feature_dim:
            raise InvalidInputError(
                f"{cfg.family} head expects [N, {cfg.feature_dim}], got {tuple(x.shape)}")
    else:
        if x.dim() != 4 or x.shape[1] != cfg.input_channels:
            raise InvalidInputError(
                f"{cfg.family} head expects [N, {cfg.input_channels}, H, W], got {tuple(x.shape)}")
        side = min(x.shape[-2:])
        if cfg.family == "cnn" and side < CNNHead.min_side:
            raise InvalidInputError(f"cnn head needs maps of side >= {CNNHead.min_side}")
        if cfg.family == "attention" and side < cfg.token_grid:
            raise InvalidInputError(f"attention head needs maps of side >= {cfg.token_grid}")
    return head(x)


# Published head rows (name, config kwargs, reported parameter count).
PUBLISHED_HEADS = (
    ("Linear-1k", dict(family="linear", input_channels=1024, pool=1), 1.0e6),
    ("Linear-4k", dict(family="linear", input_channels=1024, pool=2), 4.0e6),
    ("Linear-16k", dict(family="linear", input_channels=1024, pool=4), 16.0e6),
    ("Linear-65k", dict(family="linear", input_channels=1024, pool=8), 65.0e6),
    ("MLP-1k-2k", dict(family="mlp", input_channels=1024, pool=1, hidden_sizes=(2048,)), 4.0e6),
    ("MLP-4k-2k", dict(family="mlp", input_channels=1024, pool=2, hidden_sizes=(2048,)), 10.0e6),
    ("MLP-4k-2k-2k", dict(family="mlp", input_channels=1024, pool=2,
                          hidden_sizes=(2048, 2048)), 14.0e6),
    ("MLP-16k-2k", dict(family="mlp", input_channels=1024, pool=4, hidden_sizes=(2048,)), 34.0e6),
    ("CNN-1k-256-256", dict(family="cnn", input_channels=1024, conv_channels=(256, 256)), 2.5e6),
    ("CNN-1k-512-256", dict(family="cnn", input_channels=1024, conv_channels=(512, 256)), 3.5e6),
    ("CNN-1k-1k-256", dict(family="cnn", input_channels=1024, conv_channels=(1024, 256)), 6.0e6),
    ("CNN-1k-1k-1k", dict(family="cnn", input_channels=1024, conv_channels=(1024, 1024)), 12.0e6),
    ("CNN-1k-2k-512", dict(family="cnn", input_channels=1024, conv_channels=(2048, 512)), 14.0e6),
    ("CNN-1k-2k-2k", dict(family="cnn", input_channels=1024, conv_channels=(2048, 2048)), 32.0e6),
    ("CNN-1k-4k-2k", dict(family="cnn", input_channels=1024, conv_channels=(4096, 2048)), 48.0e6),
    ("CNN-1k-4k-2.5k", dict(family="cnn", input_channels=1024,
                            conv_channels=(4096, 2560)), 66.0e6),
    ("Attention-1K-1", dict(family="attention", input_channels=1024, num_blocks=1), 13.7e6),
    ("Attention-1K-2", dict(family="attention", input_channels=1024, num_blocks=2), 26.2e6),
    ("Attention-1K-3", dict(family="attention", input_channels=1024, num_blocks=3), 38.8e6),
    ("Attention-1K-4", dict(family="attention", input_channels=1024, num_blocks=4), 51.4e6),
    ("Attention-1K-5", dict(family="attention", input_channels=1024, num_blocks=5), 64.0e6),
)


def published_config(name: str, num_classes: int = 1000) -> HeadConfig:
    for row, kwargs, _ in PUBLISHED_HEADS:
        if row == name:
            return HeadConfig(num_classes=num_classes, **kwargs)
    raise KeyError(name)
