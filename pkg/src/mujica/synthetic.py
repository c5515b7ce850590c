"""Procedural materials and images for demos, tests and SISR warm-up.

The materials share one height field across all maps so that basecolor,
normal and roughness carry correlated structure, the property cross-map
fusion is meant to exploit.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .material_io import MapKind, MaterialMap, MaterialSet

__all__ = ["fractal_noise", "synthetic_material", "synthetic_image", "height_to_normal"]


def fractal_noise(h: int, w: int, rng: np.random.Generator, octaves: int = 4, base: int = 4) -> np.ndarray:
    """Sum of bilinearly upsampled random grids, normalised to [0, 1]."""
    out = np.zeros((h, w))
    amp = 1.0
    for o in range(octaves):
        cells = base * 2 ** o
        grid = rng.random((cells + 1, cells + 1))
        up = ndimage.zoom(grid, ((h + 1) / (cells + 1), (w + 1) / (cells + 1)), order=1)[:h, :w]
        out += amp * up
        amp *= 0.5
    out -= out.min()
    peak = out.max()
    return out / peak if peak > 0 else out


def height_to_normal(height: np.ndarray, strength: float = 4.0) -> np.ndarray:
    """Tangent-space normal map (encoded to [0, 1]) from a height field."""
    gy, gx = np.gradient(height)
    n = np.stack([-gx * strength, -gy * strength, np.ones_like(height)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return 0.5 * (n + 1.0)


def _tiles(h: int, w: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    rows = int(rng.integers(3, 7))
    tile_h = h / rows
    tile_w = tile_h * float(rng.uniform(1.5, 2.5))
    mortar = max(1.0, 0.06 * tile_h)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    row = np.floor(yy / tile_h)
    xs = xx + (row % 2) * tile_w * 0.5
    fy = yy - row * tile_h
    fx = xs - np.floor(xs / tile_w) * tile_w
    edge = np.minimum(np.minimum(fy, tile_h - fy), np.minimum(fx, tile_w - fx))
    mask = np.clip((edge - mortar * 0.5) / mortar, 0.0, 1.0)
    tile_id = row * 131 + np.floor(xs / tile_w)
    return mask, tile_id


def synthetic_material(size: "int | tuple[int, int]" = 128, seed: int = 0, metallic: bool = False) -> MaterialSet:
    """A tiled, weathered surface with correlated basecolor/normal/roughness maps."""
    h, w = (size, size) if isinstance(size, int) else size
    rng = np.random.default_rng(seed)
    mask, tile_id = _tiles(h, w, rng)
    detail = fractal_noise(h, w, rng, octaves=5, base=4)
    grain = fractal_noise(h, w, rng, octaves=3, base=16)
    jitter = np.vectorize(lambda t: (np.sin(t * 12.9898) * 43758.5453) % 1.0)(tile_id)
    height = 0.6 * mask + 0.25 * detail * mask + 0.15 * grain

    tile_color = np.array(rng.uniform(0.35, 0.8, 3))
    mortar_color = np.array(rng.uniform(0.15, 0.35, 3))
    shade = (0.75 + 0.35 * jitter)[..., None] * (0.8 + 0.4 * detail)[..., None]
    base = mask[..., None] * tile_color * shade + (1.0 - mask[..., None]) * mortar_color * (0.7 + 0.6 * grain[..., None])
    base = np.clip(base, 0.0, 1.0)

    rough = np.clip(0.35 + 0.4 * (1.0 - mask) + 0.25 * grain - 0.15 * detail * mask, 0.05, 1.0)
    maps = {
        MapKind.BASECOLOR: MaterialMap(MapKind.BASECOLOR, base),
        MapKind.NORMAL: MaterialMap(MapKind.NORMAL, height_to_normal(height, strength=0.5 * max(h, w) / 16)),
        MapKind.ROUGHNESS: MaterialMap(MapKind.ROUGHNESS, rough[..., None]),
    }
    if metallic:
        met = (jitter > 0.8).astype(np.float64) * mask
        maps[MapKind.METALLIC] = MaterialMap(MapKind.METALLIC, met[..., None])
    return MaterialSet(maps, name=f"synthetic_{seed}")


def synthetic_image(size: int, rng: np.random.Generator) -> np.ndarray:
    """Generic RGB training image: colored noise plus random strokes and boxes."""
    img = np.stack([fractal_noise(size, size, rng, octaves=4, base=int(rng.integers(2, 8))) for _ in range(3)], -1)
    img = 0.2 + 0.6 * img
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(2, 6))):
        color = rng.random(3)
        if rng.random() < 0.5:
            y0, x0 = rng.integers(0, size, 2)
            hh, ww = rng.integers(size // 8, size // 2, 2)
            sel = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:
            angle = rng.uniform(0, np.pi)
            offset = rng.uniform(-size / 2, size / 2)
            dist = (xx - size / 2) * np.cos(angle) + (yy - size / 2) * np.sin(angle) - offset
            sel = np.abs(dist) < rng.uniform(0.5, 3.0)
        img[sel] = color
    if rng.random() < 0.3:
        img = np.repeat(img.mean(axis=-1, keepdims=True), 3, axis=-1)
    return np.clip(img, 0.0, 1.0)
