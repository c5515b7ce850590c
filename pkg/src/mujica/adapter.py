"""Trainable cross-map fusion adapter and the full super-resolution model.

For every fused map kind ``m`` the adapter runs ``L`` cross-map attention
blocks.  Block ``l`` sees a dense concatenation of the (F_DF + F_0) input and
the transition-compressed outputs of blocks ``1..l-1`` of the same map, plus
the previous-layer outputs of the other maps as a cross stream.  A learnable
per-map scalar blends the last block back onto the input, then a per-map
stack of window transformer blocks refines the result before the frozen
reconstruction head.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .material_io import MapKind
from .model import (
    Mlp,
    ModelConfig,
    SISRModel,
    WindowTransformerBlock,
    gray_project,
    pad_to_multiple,
    zero_output_projections,
)
from .windows import RelativePositionBias, window_partition, window_reverse

__all__ = [
    "WindowCrossMapAttention",
    "CrossMapAttentionBlock",
    "ConcatConvBlock",
    "Transition",
    "CrossMapFusion",
    "FusedFeatureExtraction",
    "MujicaAdapter",
    "MujicaModel",
]


def _key(kind) -> str:
    return MapKind.parse(kind).value


class WindowCrossMapAttention(nn.Module):
    """Window attention where every map supplies queries against one map's keys/values.

    ``out = proj( sum_i softmax(Q_i K_m^T / sqrt(d_h) + b_i) V_m )`` per head,
    with ``Q_i = X_i P_Qi`` for each query map ``i`` and ``K_m, V_m`` from the
    window of the owning map ``m`` only.
    """

    def __init__(self, owner, query_kinds: Sequence, dim: int, embed_dim: int, heads: int, window: int):
        super().__init__()
        self.owner = _key(owner)
        kinds = [_key(k) for k in query_kinds]
        if self.owner not in kinds:
            raise ValueError("the owning map must be among the query maps")
        self.heads = heads
        self.head_dim = embed_dim // heads
        self.window = window
        self.q = nn.ModuleDict({k: nn.Linear(dim, embed_dim) for k in kinds})
        self.k = nn.Linear(dim, embed_dim)
        self.v = nn.Linear(dim, embed_dim)
        self.bias = nn.ModuleDict({k: RelativePositionBias(window, heads) for k in kinds})
        self.proj = nn.Linear(embed_dim, dim)

    @property
    def query_kinds(self) -> list[str]:
        return list(self.q.keys())

    def _split(self, t: torch.Tensor) -> torch.Tensor:
        bw, n, _ = t.shape
        return t.view(bw, n, self.heads, self.head_dim).transpose(1, 2)

    def forward(self, windows: Mapping, return_attn: bool = False):
        """``windows`` maps each query kind to a ``(num_windows, S*S, dim)`` tensor."""
        windows = {_key(k): v for k, v in windows.items()}
        if set(windows) != set(self.q.keys()):
            raise ValueError(
                f"attention for {self.owner} expects maps {sorted(self.q.keys())}, got {sorted(windows)}"
            )
        x_m = windows[self.owner]
        bw, n, _ = x_m.shape
        k = self._split(self.k(x_m))
        v = self._split(self.v(x_m))
        scale = 1.0 / math.sqrt(self.head_dim)
        out = None
        maps = {}
        for kind, proj_q in self.q.items():
            q = self._split(proj_q(windows[kind]))
            attn = (q @ k.transpose(-2, -1)) * scale + self.bias[kind]().unsqueeze(0)
            attn = attn.softmax(dim=-1)
            if return_attn:
                maps[kind] = attn
            contrib = attn @ v
            out = contrib if out is None else out + contrib
        out = self.proj(out.transpose(1, 2).reshape(bw, n, -1))
        if return_attn:
            return out, maps
        return out


class CrossMapAttentionBlock(nn.Module):
    """One fusion layer: 1x1 input projection, cross-map window attention, MLP."""

    def __init__(self, owner, kinds: Sequence, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.owner = _key(owner)
        self.others = [_key(k) for k in kinds if _key(k) != self.owner]
        self.in_channels = in_channels
        self.window = cfg.window
        c = cfg.channels
        self.in_proj = nn.Conv2d(in_channels, c, 1)
        self.norm_self = nn.LayerNorm(c)
        self.norm_cross = nn.LayerNorm(c)
        self.attn = WindowCrossMapAttention(owner, kinds, c, cfg.embed_dim, cfg.heads, cfg.window)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = Mlp(c, int(c * cfg.mlp_ratio))

    def _check(self, dense: torch.Tensor, cross: Mapping) -> None:
        if dense.shape[1] != self.in_channels:
            raise ValueError(f"block expects {self.in_channels} input channels, got {dense.shape[1]}")
        if set(cross) != set(self.others):
            raise ValueError(f"cross stream must cover {self.others}, got {sorted(cross)}")

    def forward(self, dense: torch.Tensor, cross: Mapping) -> torch.Tensor:
        cross = {_key(k): v for k, v in cross.items()}
        self._check(dense, cross)
        _, _, h, w = dense.shape
        x = self.in_proj(dense).permute(0, 2, 3, 1)
        windows = {self.owner: window_partition(self.norm_self(x), self.window)}
        for kind in self.others:
            windows[kind] = window_partition(self.norm_cross(cross[kind].permute(0, 2, 3, 1)), self.window)
        x = x + window_reverse(self.attn(windows), self.window, h, w)
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2)


class ConcatConvBlock(nn.Module):
    """Ablation baseline: concatenate self and cross features, squeeze back with a 1x1 conv."""

    def __init__(self, owner, kinds: Sequence, in_channels: int, cfg: ModelConfig):
        super().__init__()
        self.owner = _key(owner)
        self.others = [_key(k) for k in kinds if _key(k) != self.owner]
        self.in_channels = in_channels
        c = cfg.channels
        self.in_proj = nn.Conv2d(in_channels, c, 1)
        self.norm_self = nn.LayerNorm(c)
        self.norm_cross = nn.LayerNorm(c)
        self.fuse = nn.Linear(c * (1 + len(self.others)), c)
        self.norm2 = nn.LayerNorm(c)
        self.mlp = Mlp(c, int(c * cfg.mlp_ratio))

    def forward(self, dense: torch.Tensor, cross: Mapping) -> torch.Tensor:
        cross = {_key(k): v for k, v in cross.items()}
        if dense.shape[1] != self.in_channels:
            raise ValueError(f"block expects {self.in_channels} input channels, got {dense.shape[1]}")
        if set(cross) != set(self.others):
            raise ValueError(f"cross stream must cover {self.others}, got {sorted(cross)}")
        x = self.in_proj(dense).permute(0, 2, 3, 1)
        parts = [self.norm_self(x)] + [self.norm_cross(cross[k].permute(0, 2, 3, 1)) for k in self.others]
        x = x + self.fuse(torch.cat(parts, dim=-1))
        x = x + self.mlp(self.norm2(x))
        return x.permute(0, 3, 1, 2)


class Transition(nn.Module):
    """1x1 conv to ``growth`` channels followed by LeakyReLU(0.2)."""

    def __init__(self, channels: int, growth: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, growth, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.leaky_relu(self.conv(x), 0.2)


class CrossMapFusion(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        kinds = list(cfg.fused_maps)
        block_cls = CrossMapAttentionBlock if cfg.fusion == "wmca" else ConcatConvBlock
        self.blocks = nn.ModuleDict()
        self.transitions = nn.ModuleDict()
        for m in kinds:
            self.blocks[m] = nn.ModuleList(
                block_cls(m, kinds, cfg.block_input_width(l), cfg) for l in range(1, cfg.cabs + 1)
            )
            if cfg.connection == "dc":
                self.transitions[m] = nn.ModuleList(
                    Transition(cfg.channels, cfg.growth) for _ in range(cfg.cabs - 1)
                )
        if cfg.connection != "nrc":
            self.alpha = nn.ParameterDict({m: nn.Parameter(torch.zeros(())) for m in kinds})
        else:
            self.alpha = None

    @property
    def kinds(self) -> list[str]:
        return list(self.blocks.keys())

    def forward(self, deep: Mapping, shallow: Mapping) -> dict[str, torch.Tensor]:
        """Fuse per-map deep features ``F_DF`` and shallow features ``F_0``."""
        deep = {_key(k): v for k, v in deep.items()}
        shallow = {_key(k): v for k, v in shallow.items()}
        kinds = self.kinds
        missing = [k for k in kinds if k not in deep or k not in shallow]
        if missing:
            raise ValueError(f"fusion inputs missing map(s): {missing}")

        base = {m: deep[m] + shallow[m] for m in kinds}
        dense = {m: [base[m]] for m in kinds}
        prev = dict(deep)  # the first block's cross stream is F_DF of the other maps
        x = {}
        for l in range(self.cfg.cabs):
            x = {}
            for m in kinds:
                cross = {n: prev[n] for n in kinds if n != m}
                if self.cfg.connection == "dc":
                    inp = torch.cat(dense[m], dim=1) if len(dense[m]) > 1 else dense[m][0]
                else:
                    inp = base[m] if l == 0 else prev[m]
                x[m] = self.blocks[m][l](inp, cross)
            if self.cfg.connection == "dc" and l < self.cfg.cabs - 1:
                for m in kinds:
                    dense[m].append(self.transitions[m][l](x[m]))
            prev = x

        if self.alpha is None:
            return x
        return {m: self.alpha[m] * x[m] + base[m] for m in kinds}


class FusedFeatureExtraction(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(
            WindowTransformerBlock(cfg.channels, cfg.embed_dim, cfg.heads, cfg.window, cfg.mlp_ratio)
            for _ in range(cfg.ffe_depth)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            x = blk(x)
        return x


class MujicaAdapter(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.fusion = CrossMapFusion(cfg)
        self.ffe = nn.ModuleDict({m: FusedFeatureExtraction(cfg) for m in cfg.fused_maps})


class MujicaModel(nn.Module):
    """Frozen SISR path plus the trainable cross-map adapter."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.sisr = SISRModel(cfg)
        self.adapter = MujicaAdapter(cfg)

    # -- setup -----------------------------------------------------------

    def freeze_sisr(self) -> None:
        self.sisr.freeze(True)

    def init_ffe_from_backbone(self) -> None:
        """Copy backbone block weights into every FFE stack and zero the output projections."""
        src = list(self.sisr.backbone.blocks)
        with torch.no_grad():
            for ffe in self.adapter.ffe.values():
                for i, blk in enumerate(ffe.blocks):
                    blk.load_state_dict(src[i % len(src)].state_dict())
                    zero_output_projections(blk)

    def adapter_parameters(self):
        return self.adapter.parameters()

    # -- forward ---------------------------------------------------------

    def _post(self, img: torch.Tensor, kind: str, h: int, w: int, clamp: bool) -> torch.Tensor:
        s = self.cfg.scale
        img = img[..., : h * s, : w * s]
        if MapKind(kind).is_gray:
            img = gray_project(img)
        if clamp:
            img = img.clamp(0.0, 1.0)
        return img

    def sisr_forward(self, img: torch.Tensor, kind, clamp: "bool | None" = None) -> torch.Tensor:
        """Upscale one map through the frozen path alone."""
        clamp = (not self.training) if clamp is None else clamp
        padded, h, w = pad_to_multiple(img, self.cfg.window)
        return self._post(self.sisr(padded), _key(kind), h, w, clamp)

    def forward(self, lr: Mapping, clamp: "bool | None" = None) -> dict[str, torch.Tensor]:
        """Super-resolve every fused and pass-through map present in ``lr``.

        ``lr`` maps kind -> ``(B, 3, H, W)`` tensor.  Fused maps go through the
        adapter; pass-through maps use the frozen path.
        """
        clamp = (not self.training) if clamp is None else clamp
        lr = {_key(k): v for k, v in lr.items()}
        kinds = list(self.cfg.fused_maps)
        missing = [k for k in kinds if k not in lr]
        if missing:
            raise ValueError(f"missing fused map(s): {missing}")
        shapes = {tuple(v.shape) for v in lr.values()}
        if len(shapes) > 1:
            raise ValueError(f"all input maps must share one shape, got {sorted(shapes)}")

        padded = {}
        for k, v in lr.items():
            padded[k], h, w = pad_to_multiple(v, self.cfg.window)
        shallow, deep = {}, {}
        for k in kinds:
            shallow[k], deep[k] = self.sisr.features(padded[k])
        fused = self.adapter.fusion(deep, shallow)
        out = {}
        for k in kinds:
            feat = self.adapter.ffe[k](fused[k])
            out[k] = self._post(self.sisr.head(feat), k, h, w, clamp)
        for k in self.cfg.passthrough_maps:
            if k in padded:
                out[k] = self._post(self.sisr(padded[k]), k, h, w, clamp)
        return out
