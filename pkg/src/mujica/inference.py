"""Inference helpers, including overlapping-tile upscaling of large materials."""

from __future__ import annotations

from typing import Mapping

import numpy as np
import torch

from .material_io import MapKind, MaterialMap, MaterialSet, MissingMap

__all__ = ["upscale_tensors", "upscale_material", "tile_spans"]


# LR pixels a tile edge can disturb beyond its window: the shallow 3x3 conv plus the head convs
HEAD_REACH = 2


def tile_spans(size: int, tile: int, margin: int, align: int = 1) -> list[tuple[int, int]]:
    """``(start, end)`` tiles along one axis.

    Starts are multiples of ``align`` so the window grid of every tile lines up
    with the grid of the whole image; consecutive tiles overlap by at least
    ``2 * margin``.  The last tile runs to the far edge.
    """
    if tile >= size:
        return [(0, size)]
    step = (tile - 2 * margin) // align * align
    if step <= 0:
        raise ValueError(f"tile {tile} too small for a {margin}px margin on a {align}px grid")
    starts = list(range(0, size - tile, step))
    last = (size - tile) // align * align
    if not starts or starts[-1] != last:
        starts.append(last)
    return [(s, min(s + tile, size)) if s != last else (s, size) for s in starts]


def _keep_range(start: int, end: int, size: int, margin: int) -> tuple[int, int]:
    lo = start + (margin if start > 0 else 0)
    hi = end - (margin if end < size else 0)
    return lo, hi


@torch.no_grad()
def upscale_tensors(model, lr: Mapping, tile: "int | None" = None, overlap: int = 8) -> dict[str, torch.Tensor]:
    """Run ``model`` on ``(1, 3, H, W)`` maps, optionally tile by tile.

    Each tile contributes only its centre; where kept regions overlap the
    outputs are averaged.  The trimmed margin is ``overlap`` but never less
    than one attention window plus ``HEAD_REACH``, since a tile edge perturbs
    its whole (unshifted) border window.
    """
    was_training = model.training
    model.eval()
    try:
        lr = {MapKind.parse(k).value: v for k, v in lr.items()}
        _, _, h, w = next(iter(lr.values())).shape
        if tile is None or (h <= tile and w <= tile):
            return model(lr, clamp=True)
        s = model.cfg.scale
        window = model.cfg.window
        margin = max(overlap, window + HEAD_REACH)
        acc: dict[str, torch.Tensor] = {}
        weight = torch.zeros(1, 1, h * s, w * s, dtype=next(iter(lr.values())).dtype)
        for y, ye in tile_spans(h, tile, margin, window):
            for x, xe in tile_spans(w, tile, margin, window):
                out = model({k: v[..., y:ye, x:xe] for k, v in lr.items()}, clamp=True)
                y0, y1 = _keep_range(y, ye, h, margin)
                x0, x1 = _keep_range(x, xe, w, margin)
                for k, v in out.items():
                    if k not in acc:
                        acc[k] = torch.zeros(v.shape[0], v.shape[1], h * s, w * s, dtype=v.dtype)
                    acc[k][..., y0 * s:y1 * s, x0 * s:x1 * s] += v[..., (y0 - y) * s:(y1 - y) * s, (x0 - x) * s:(x1 - x) * s]
                weight[..., y0 * s:y1 * s, x0 * s:x1 * s] += 1.0
        return {k: v / weight for k, v in acc.items()}
    finally:
        model.train(was_training)


def upscale_material(model, lr: MaterialSet, tile: "int | None" = None, overlap: int = 8) -> MaterialSet:
    """Super-resolve the fused and pass-through maps of an LR material."""
    cfg = model.cfg
    missing = [k.value for k in cfg.fused_kinds if k not in lr]
    if missing:
        raise MissingMap(f"{lr.name or 'material'} is missing fused map(s): {', '.join(missing)}")
    kinds = [k for k in cfg.sr_kinds if k in lr]
    dtype = next(model.parameters()).dtype
    tensors = {
        k.value: torch.as_tensor(np.ascontiguousarray(lr[k].pixels.transpose(2, 0, 1)), dtype=dtype)[None]
        for k in kinds
    }
    out = upscale_tensors(model, tensors, tile, overlap)
    maps = {MapKind(k): MaterialMap(MapKind(k), v[0].numpy().transpose(1, 2, 0)) for k, v in out.items()}
    return MaterialSet(maps, name=lr.name)
