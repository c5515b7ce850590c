"""Frozen single-image SR path: shallow conv, surrogate backbone, HQ reconstruction.

The published adapter sits on top of a pre-trained Swin-style SR network.
Here that network is a small stand-in with the same contract: a shared
3x3 conv, a shape-preserving deep feature extractor and a pixel-shuffle
reconstruction head, all of which are frozen once the adapter trains.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch
from torch import nn
from torch.nn import functional as F

from .material_io import MapKind
from .windows import RelativePositionBias, window_partition, window_reverse

__all__ = [
    "ModelConfig",
    "ShallowExtractor",
    "WindowAttention",
    "WindowTransformerBlock",
    "SurrogateBackbone",
    "ReconstructionHead",
    "SISRModel",
    "pixel_shuffle",
    "pixel_unshuffle",
    "zero_output_projections",
]

CONNECTIONS = ("nrc", "rc", "dc")
FUSIONS = ("concat_conv", "wmca")


@dataclass
class ModelConfig:
    channels: int = 32
    embed_dim: int = 48
    heads: int = 6
    window: int = 8
    cabs: int = 4
    growth: int = 16
    ffe_depth: int = 3
    scale: int = 2
    fused_maps: tuple[str, ...] = ("basecolor", "normal")
    passthrough_maps: tuple[str, ...] = ("roughness",)
    connection: str = "dc"
    fusion: str = "wmca"
    mlp_ratio: float = 2.0
    backbone_depth: int = 2

    def __post_init__(self) -> None:
        self.fused_maps = tuple(MapKind.parse(k).value for k in self.fused_maps)
        self.passthrough_maps = tuple(MapKind.parse(k).value for k in self.passthrough_maps)
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.cabs < 1:
            raise ValueError("need at least one cross-map attention block")
        if self.connection not in CONNECTIONS:
            raise ValueError(f"connection must be one of {CONNECTIONS}, got {self.connection!r}")
        if self.fusion not in FUSIONS:
            raise ValueError(f"fusion must be one of {FUSIONS}, got {self.fusion!r}")
        if self.scale not in (2, 4):
            raise ValueError(f"scale must be 2 or 4, got {self.scale}")
        if not self.fused_maps:
            raise ValueError("fused_maps must name at least one map")
        if len(set(self.fused_maps)) != len(self.fused_maps):
            raise ValueError("fused_maps contains duplicates")
        if set(self.fused_maps) & set(self.passthrough_maps):
            raise ValueError("a map cannot be both fused and passed through")
        for name in ("channels", "growth", "window", "backbone_depth"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.ffe_depth < 0:
            raise ValueError("ffe_depth must be nonnegative")

    @property
    def fused_kinds(self) -> list[MapKind]:
        return [MapKind(k) for k in self.fused_maps]

    @property
    def passthrough_kinds(self) -> list[MapKind]:
        return [MapKind(k) for k in self.passthrough_maps]

    @property
    def sr_kinds(self) -> list[MapKind]:
        return self.fused_kinds + self.passthrough_kinds

    def block_input_width(self, layer: int) -> int:
        """Channels entering the 1-based ``layer``-th block."""
        if self.connection == "dc":
            return self.channels + (layer - 1) * self.growth
        return self.channels

    def to_dict(self) -> dict:
        d = asdict(self)
        d["fused_maps"] = list(self.fused_maps)
        d["passthrough_maps"] = list(self.passthrough_maps)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def pixel_shuffle(x: torch.Tensor, scale: int) -> torch.Tensor:
    """``(B, C*s*s, H, W) -> (B, C, H*s, W*s)``; channel ``c*s*s + i*s + j`` lands at offset (i, j)."""
    return F.pixel_shuffle(x, scale)


def pixel_unshuffle(x: torch.Tensor, scale: int) -> torch.Tensor:
    return F.pixel_unshuffle(x, scale)


class ShallowExtractor(nn.Module):
    """Shared 3x3 conv lifting an RGB map to ``channels`` features."""

    def __init__(self, channels: int, in_channels: int = 3):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, channels, 3, 1, 1)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return self.conv(img)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(x)))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside each window, with relative position bias.

    Queries, keys and values are projected from ``dim`` to ``embed_dim``;
    the output projection maps back to ``dim``.
    """

    def __init__(self, dim: int, embed_dim: int, heads: int, window: int):
        super().__init__()
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.scale = self.head_dim ** -0.5
        self.qkv = nn.Linear(dim, 3 * embed_dim)
        self.bias = RelativePositionBias(window, heads)
        self.proj = nn.Linear(embed_dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bw, n, _ = x.shape
        qkv = self.qkv(x).view(bw, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q * self.scale) @ k.transpose(-2, -1) + self.bias().unsqueeze(0)
        attn = attn.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bw, n, -1)
        return self.proj(out)


class WindowTransformerBlock(nn.Module):
    """Pre-norm residual block: x + Attn(LN(x)), then x + MLP(LN(x)).  No window shift."""

    def __init__(self, dim: int, embed_dim: int, heads: int, window: int, mlp_ratio: float = 2.0):
        super().__init__()
        self.window = window
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, embed_dim, heads, window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        _, _, h, w = x.shape
        t = x.permute(0, 2, 3, 1)
        a = window_partition(self.norm1(t), self.window)
        t = t + window_reverse(self.attn(a), self.window, h, w)
        t = t + self.mlp(self.norm2(t))
        return t.permute(0, 3, 1, 2)


def zero_output_projections(block: nn.Module) -> None:
    """Zero the last linear layer of every residual branch so ``block`` acts as the identity."""
    for mod in block.modules():
        if isinstance(mod, WindowAttention):
            nn.init.zeros_(mod.proj.weight)
            nn.init.zeros_(mod.proj.bias)
        elif isinstance(mod, Mlp):
            nn.init.zeros_(mod.fc2.weight)
            nn.init.zeros_(mod.fc2.bias)


class SurrogateBackbone(nn.Module):
    """Shape-preserving deep feature extractor standing in for a pre-trained SR body."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            WindowTransformerBlock(cfg.channels, cfg.embed_dim, cfg.heads, cfg.window, cfg.mlp_ratio)
            for _ in range(cfg.backbone_depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class ReconstructionHead(nn.Module):
    """Chained x2 (conv -> pixel shuffle) stages followed by a 3x3 conv to RGB."""

    def __init__(self, channels: int, scale: int, out_channels: int = 3):
        super().__init__()
        if scale not in (2, 4):
            raise ValueError(f"unsupported scale {scale}")
        stages = 1 if scale == 2 else 2
        self.upconvs = nn.ModuleList(nn.Conv2d(channels, channels * 4, 3, 1, 1) for _ in range(stages))
        self.out = nn.Conv2d(channels, out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for conv in self.upconvs:
            x = pixel_shuffle(conv(x), 2)
        return self.out(x)


class SISRModel(nn.Module):
    """shallow -> backbone -> head(F_0 + F_DF): the path the adapter is bolted onto."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.shallow = ShallowExtractor(cfg.channels)
        self.backbone = SurrogateBackbone(cfg)
        self.head = ReconstructionHead(cfg.channels, cfg.scale)

    def features(self, img: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        f0 = self.shallow(img)
        return f0, self.backbone(f0)

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        f0, fdf = self.features(img)
        return self.head(f0 + fdf)

    def freeze(self, frozen: bool = True) -> None:
        for p in self.parameters():
            p.requires_grad_(not frozen)

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def gray_project(img: torch.Tensor) -> torch.Tensor:
    return img.mean(dim=1, keepdim=True).expand_as(img)


def pad_to_multiple(img: torch.Tensor, multiple: int) -> tuple[torch.Tensor, int, int]:
    _, _, h, w = img.shape
    ph = (multiple - h % multiple) % multiple
    pw = (multiple - w % multiple) % multiple
    if ph or pw:
        mode = "reflect" if (ph < h and pw < w) else "replicate"
        img = F.pad(img, (0, pw, 0, ph), mode=mode)
    return img, h, w
