"""Training objective: render-space loss plus direct map loss.

Both halves combine a Charbonnier pixel term with a layer-weighted
perceptual term computed on a frozen feature pyramid.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .material_io import MapKind
from .renderer import LightSet, ShadingParams, render_tensors

__all__ = [
    "EPS",
    "charbonnier",
    "PerceptualExtractor",
    "perceptual_loss",
    "reconstruction_loss",
    "material_loss",
    "total_loss",
    "LossReport",
]

EPS = 1e-3
DEFAULT_LAYER_WEIGHTS = (1.0, 0.5, 0.25, 0.125)


def charbonnier(pred: torch.Tensor, gt: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean of ``sqrt(diff^2 + eps^2)`` over all elements."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    diff = pred - gt
    return torch.sqrt(diff * diff + eps * eps).mean()


class PerceptualExtractor(nn.Module):
    """Frozen feature pyramid with one weight per tapped layer.

    The default build is a VGG-style stack of four conv/ReLU stages (max-pool
    between stages) with weights drawn from a fixed seed.  ``layers`` may be any
    sequence of modules applied in order; every stage output is tapped.
    """

    def __init__(self, layers: Sequence[nn.Module], weights: Sequence[float]):
        super().__init__()
        if len(layers) != len(weights):
            raise ValueError("need exactly one weight per layer")
        if any(w < 0 for w in weights):
            raise ValueError("layer weights must be nonnegative")
        self.layers = nn.ModuleList(layers)
        self.weights = tuple(float(w) for w in weights)
        for p in self.parameters():
            p.requires_grad_(False)

    @classmethod
    def random_pyramid(
        cls,
        seed: int = 0,
        widths: Sequence[int] = (16, 32, 64, 64),
        weights: Sequence[float] = DEFAULT_LAYER_WEIGHTS,
    ) -> "PerceptualExtractor":
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c_in = 3
        for i, c in enumerate(widths):
            conv = nn.Conv2d(c_in, c, 3, 1, 1)
            with torch.no_grad():
                std = (2.0 / (9 * c_in)) ** 0.5
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                conv.bias.zero_()
            layers.append(_Stage(conv, pool=i > 0))
            c_in = c
        return cls(layers, weights)

    @classmethod
    def identity(cls) -> "PerceptualExtractor":
        return cls([nn.Identity()], (1.0,))

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, torch.Tensor], weights: Sequence[float]) -> "PerceptualExtractor":
        """Build from ``stage{i}.weight`` / ``stage{i}.bias`` conv tensors (e.g. a MUJICA1 archive)."""
        layers = []
        i = 0
        while f"stage{i}.weight" in tensors:
            w = tensors[f"stage{i}.weight"]
            conv = nn.Conv2d(w.shape[1], w.shape[0], w.shape[2], 1, w.shape[2] // 2)
            with torch.no_grad():
                conv.weight.copy_(w)
                conv.bias.copy_(tensors.get(f"stage{i}.bias", torch.zeros(w.shape[0])))
            layers.append(_Stage(conv, pool=i > 0))
            i += 1
        if not layers:
            raise ValueError("no stage tensors found for the perceptual extractor")
        return cls(layers, weights)

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        for layer in self.layers:
            x = layer(x)
            feats.append(x)
        return feats

    def train(self, mode: bool = True):
        return super().train(False)


class _Stage(nn.Module):
    def __init__(self, conv: nn.Conv2d, pool: bool):
        super().__init__()
        self.conv = conv
        self.pool = pool

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.pool and min(x.shape[-2:]) >= 2:
            x = F.max_pool2d(x, 2, ceil_mode=True)
        return F.relu(self.conv(x))


def perceptual_loss(pred: torch.Tensor, gt: torch.Tensor, ex: PerceptualExtractor, eps: float = EPS) -> torch.Tensor:
    """``sum_i lambda_i * charbonnier(phi_i(gt), phi_i(pred))``."""
    total = pred.new_zeros(())
    if not any(ex.weights):
        return total
    fp = ex.features(pred)
    fg = ex.features(gt)
    for w, a, b in zip(ex.weights, fg, fp):
        if w:
            total = total + w * charbonnier(b, a, eps)
    return total


@dataclass
class LossReport:
    total: float
    rec: float
    mat: float
    rec_pixel: float
    rec_perc: float
    mat_pixel: float
    mat_perc: float
    n_lights: int
    per_map: dict = field(default_factory=dict)
    per_light: list = field(default_factory=list)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **asdict(self)})


def _as_maps(maps: Mapping) -> dict[MapKind, torch.Tensor]:
    return {MapKind.parse(k): v for k, v in maps.items()}


def reconstruction_loss(
    sr: Mapping,
    gt: Mapping,
    lights: LightSet,
    ex: PerceptualExtractor,
    shading: ShadingParams = ShadingParams(),
    eps: float = EPS,
) -> tuple[torch.Tensor, dict]:
    """Sum over lights of pixel + perceptual loss between GT and SR renders."""
    if lights is None or len(lights) == 0:
        raise ValueError("reconstruction loss needs at least one light")
    r_sr = render_tensors(_as_maps(sr), lights, shading)
    r_gt = render_tensors(_as_maps(gt), lights, shading)
    pixel = perc = None
    per_light = []
    for a, b in zip(r_gt, r_sr):
        lp = charbonnier(b, a, eps)
        lq = perceptual_loss(b, a, ex, eps)
        per_light.append({"pixel": lp.item(), "perc": lq.item()})
        pixel = lp if pixel is None else pixel + lp
        perc = lq if perc is None else perc + lq
    return pixel + perc, {"pixel": pixel, "perc": perc, "per_light": per_light}


def material_loss(
    sr: Mapping,
    gt: Mapping,
    ex: PerceptualExtractor,
    kinds: "Sequence | None" = None,
    eps: float = EPS,
) -> tuple[torch.Tensor, dict]:
    """Sum over maps of pixel + perceptual loss, compared without rendering."""
    sr = _as_maps(sr)
    gt = _as_maps(gt)
    kinds = [MapKind.parse(k) for k in kinds] if kinds is not None else list(sr)
    missing = [k.value for k in kinds if k not in sr or k not in gt]
    if missing:
        raise ValueError(f"material loss: map(s) {missing} missing on one side")
    pixel = perc = None
    per_map = {}
    for k in kinds:
        lp = charbonnier(sr[k], gt[k], eps)
        lq = perceptual_loss(sr[k], gt[k], ex, eps)
        per_map[k.value] = {"pixel": lp.item(), "perc": lq.item()}
        pixel = lp if pixel is None else pixel + lp
        perc = lq if perc is None else perc + lq
    return pixel + perc, {"pixel": pixel, "perc": perc, "per_map": per_map}


def total_loss(
    sr: Mapping,
    gt: Mapping,
    lights: LightSet,
    ex: PerceptualExtractor,
    kinds: "Sequence | None" = None,
    shading: ShadingParams = ShadingParams(),
    eps: float = EPS,
    render_sr: "Mapping | None" = None,
) -> tuple[torch.Tensor, LossReport]:
    """``L_rec + L_mat``.

    ``kinds`` selects the maps compared directly (default: all of ``sr``).
    ``render_sr`` optionally supplies the full map set to render on the SR
    side when ``sr`` only holds the super-resolved subset.
    """
    rec, rb = reconstruction_loss(render_sr if render_sr is not None else sr, gt, lights, ex, shading, eps)
    mat, mb = material_loss(sr, gt, ex, kinds, eps)
    total = rec + mat
    report = LossReport(
        total=rec.item() + mat.item(),
        rec=rec.item(),
        mat=mat.item(),
        rec_pixel=rb["pixel"].item(),
        rec_perc=rb["perc"].item(),
        mat_pixel=mb["pixel"].item(),
        mat_perc=mb["perc"].item(),
        n_lights=len(lights),
        per_map=mb["per_map"],
        per_light=rb["per_light"],
    )
    return total, report
