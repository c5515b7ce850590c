"""Cook-Torrance rendering of material maps under distant point lights.

Everything here is written with torch ops so the render can sit inside the
training loss and be differentiated with respect to the maps.  Images are
channel-first (``..., 3, H, W``) on the tensor side and ``H x W x 3`` numpy
arrays on the :class:`~mujica.material_io.MaterialSet` side.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .material_io import MIN_NORMAL_LENGTH, MapKind, MaterialSet, MissingMap

__all__ = [
    "Light",
    "LightSet",
    "ShadingParams",
    "fibonacci_hemisphere",
    "ndf_ggx",
    "schlick_k",
    "geometry_smith",
    "fresnel_schlick",
    "decode_normal_tensor",
    "render_maps",
    "render_point_light",
    "render_set",
    "render_tensors",
    "linear_to_srgb",
]

GOLDEN_CONJUGATE = (math.sqrt(5.0) - 1.0) / 2.0
MIN_ROUGHNESS = 0.01
SPECULAR_EPS = 1e-6


@dataclass(frozen=True)
class Light:
    direction: tuple[float, float, float]
    intensity: float = 1.0

    def __post_init__(self) -> None:
        d = np.asarray(self.direction, dtype=np.float64)
        if d.shape != (3,):
            raise ValueError("light direction must be a 3-vector")
        n = float(np.linalg.norm(d))
        if abs(n - 1.0) > 1e-9:
            raise ValueError(f"light direction must be unit length (got |d|={n})")
        if d[2] <= 0.0:
            raise ValueError("light direction must point into the upper hemisphere")
        if self.intensity < 0:
            raise ValueError("light intensity must be nonnegative")
        object.__setattr__(self, "direction", tuple(float(v) for v in d))


@dataclass
class LightSet:
    lights: list[Light]

    def __post_init__(self) -> None:
        if not self.lights:
            raise ValueError("a light set needs at least one light")

    def __len__(self) -> int:
        return len(self.lights)

    def __iter__(self):
        return iter(self.lights)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return LightSet(self.lights[i])
        return self.lights[i]

    def select(self, indices: Sequence[int]) -> "LightSet":
        return LightSet([self.lights[i] for i in indices])

    def to_json(self) -> str:
        return json.dumps([[*l.direction, l.intensity] for l in self.lights])

    @classmethod
    def from_json(cls, text: str) -> "LightSet":
        try:
            rows = json.loads(text)
            lights = []
            for row in rows:
                if len(row) == 3:
                    lights.append(Light(tuple(row)))
                elif len(row) == 4:
                    lights.append(Light(tuple(row[:3]), float(row[3])))
                else:
                    raise ValueError(f"light entry must have 3 or 4 numbers, got {row!r}")
        except (TypeError, json.JSONDecodeError) as exc:
            raise ValueError(f"malformed light set: {exc}") from exc
        return cls(lights)

    @classmethod
    def load(cls, path: "str | os.PathLike") -> "LightSet":
        return cls.from_json(Path(path).read_text())

    def save(self, path: "str | os.PathLike") -> None:
        Path(path).write_text(self.to_json())


@dataclass(frozen=True)
class ShadingParams:
    view: tuple[float, float, float] = (0.0, 0.0, 1.0)
    f0_dielectric: float = 0.04
    exposure: float = 1.0

    def __post_init__(self) -> None:
        if self.view[2] <= 0:
            raise ValueError("view direction must have positive z")
        if not 0.0 < self.f0_dielectric < 1.0:
            raise ValueError("f0_dielectric must lie in (0, 1)")
        if self.exposure <= 0:
            raise ValueError("exposure must be positive")


def fibonacci_hemisphere(n: int, intensity: float = 1.0) -> LightSet:
    """``n`` quasi-uniform directions on the upper hemisphere.

    z_i = (i + 0.5) / n and the azimuth advances by the golden-ratio
    conjugate of a full turn per point.
    """
    if n < 1:
        raise ValueError("need at least one light")
    lights = []
    for i in range(n):
        z = (i + 0.5) / n
        r = math.sqrt(max(0.0, 1.0 - z * z))
        phi = 2.0 * math.pi * ((i * GOLDEN_CONJUGATE) % 1.0)
        d = np.array([r * math.cos(phi), r * math.sin(phi), z])
        d /= np.linalg.norm(d)
        lights.append(Light(tuple(d), intensity))
    return LightSet(lights)


def _t(x, like: "torch.Tensor | None" = None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def ndf_ggx(n_dot_h, roughness):
    """Trowbridge-Reitz GGX distribution with alpha = roughness^2."""
    n_dot_h = _t(n_dot_h)
    roughness = _t(roughness, n_dot_h)
    a = torch.clamp(roughness, min=MIN_ROUGHNESS) ** 2
    a2 = a * a
    denom = n_dot_h * n_dot_h * (a2 - 1.0) + 1.0
    return a2 / (math.pi * denom * denom)


def schlick_k(roughness):
    return (roughness + 1.0) ** 2 / 8.0


def geometry_smith(n_dot_v, n_dot_l, roughness):
    """Smith shadowing-masking with the Schlick-GGX G1 for direct lighting."""
    n_dot_v = _t(n_dot_v)
    n_dot_l = _t(n_dot_l, n_dot_v)
    k = schlick_k(_t(roughness, n_dot_v))

    def g1(x):
        return x / (x * (1.0 - k) + k)

    return g1(n_dot_v) * g1(n_dot_l)


def fresnel_schlick(h_dot_v, f0):
    h_dot_v = _t(h_dot_v)
    f0 = _t(f0, h_dot_v)
    return f0 + (1.0 - f0) * (1.0 - h_dot_v) ** 5


def decode_normal_tensor(p: torch.Tensor) -> torch.Tensor:
    """Differentiable ``normalize(2p - 1)`` over dim -3; lower-hemisphere vectors become +z."""
    v = 2.0 * p - 1.0
    norm = torch.sqrt(torch.clamp((v * v).sum(dim=-3, keepdim=True), min=1e-24))
    bad = (norm < MIN_NORMAL_LENGTH) | (v[..., 2:3, :, :] <= 0.0)
    n = v / torch.where(norm < MIN_NORMAL_LENGTH, torch.ones_like(norm), norm)
    up = torch.zeros_like(n)
    up[..., 2, :, :] = 1.0
    return torch.where(bad, up, n)


def _dot(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return (a * b).sum(dim=-3, keepdim=True)


def render_maps(
    basecolor: torch.Tensor,
    normal: torch.Tensor,
    roughness: torch.Tensor,
    metallic: "torch.Tensor | None",
    light: Light,
    shading: ShadingParams = ShadingParams(),
    clamp: bool = True,
) -> torch.Tensor:
    """Render channel-first maps (``..., 3, H, W``) under one light.

    Gray maps may have 1 or 3 channels; 3-channel gray maps are averaged.
    With ``clamp=False`` the raw linear radiance is returned.
    """
    like = basecolor
    if roughness.shape[-3] == 3:
        roughness = roughness.mean(dim=-3, keepdim=True)
    if metallic is None:
        metallic = torch.zeros_like(roughness)
    elif metallic.shape[-3] == 3:
        metallic = metallic.mean(dim=-3, keepdim=True)

    view_shape = (3, 1, 1)
    l = torch.as_tensor(light.direction, dtype=like.dtype, device=like.device).view(view_shape)
    v = torch.as_tensor(shading.view, dtype=like.dtype, device=like.device).view(view_shape)
    v = v / torch.linalg.vector_norm(v)
    h = l + v
    h = h / torch.linalg.vector_norm(h)

    n = decode_normal_tensor(normal)
    n_dot_l = _dot(n, l)
    lit = n_dot_l > 0.0
    n_dot_l_pos = torch.clamp(n_dot_l, min=0.0)
    n_dot_v = torch.clamp(_dot(n, v), min=0.0)
    n_dot_h = torch.clamp(_dot(n, h), min=0.0)
    h_dot_v = torch.clamp((h * v).sum(dim=0), min=0.0)

    f0 = shading.f0_dielectric * (1.0 - metallic) + basecolor * metallic
    F = fresnel_schlick(h_dot_v, f0)
    D = ndf_ggx(n_dot_h, roughness)
    G = geometry_smith(n_dot_v, n_dot_l_pos, roughness)
    kd = (1.0 - F) * (1.0 - metallic)
    diffuse = kd * basecolor / math.pi
    specular = D * F * G / (4.0 * n_dot_v * n_dot_l_pos + SPECULAR_EPS)
    radiance = (diffuse + specular) * (light.intensity * shading.exposure) * n_dot_l_pos
    radiance = torch.where(lit, radiance, torch.zeros_like(radiance))
    if clamp:
        radiance = torch.clamp(radiance, 0.0, 1.0)
    return radiance


def _set_tensor(material: MaterialSet, kind: MapKind, dtype) -> torch.Tensor:
    return torch.as_tensor(np.ascontiguousarray(material[kind].pixels.transpose(2, 0, 1)), dtype=dtype)


def render_point_light(
    material: MaterialSet,
    light: Light,
    shading: ShadingParams = ShadingParams(),
    clamp: bool = True,
) -> np.ndarray:
    """Render a MaterialSet; returns an ``H x W x 3`` float array."""
    for kind in (MapKind.BASECOLOR, MapKind.NORMAL, MapKind.ROUGHNESS):
        if kind not in material:
            raise MissingMap(f"rendering needs a {kind.value} map")
    dtype = torch.float64
    metallic = _set_tensor(material, MapKind.METALLIC, dtype) if MapKind.METALLIC in material else None
    img = render_maps(
        _set_tensor(material, MapKind.BASECOLOR, dtype),
        _set_tensor(material, MapKind.NORMAL, dtype),
        _set_tensor(material, MapKind.ROUGHNESS, dtype),
        metallic,
        light,
        shading,
        clamp=clamp,
    )
    return img.numpy().transpose(1, 2, 0)


def render_set(
    material: MaterialSet,
    lights: LightSet,
    shading: ShadingParams = ShadingParams(),
    clamp: bool = True,
) -> list[np.ndarray]:
    return [render_point_light(material, light, shading, clamp) for light in lights]


def render_tensors(
    maps: Mapping[MapKind, torch.Tensor],
    lights: LightSet,
    shading: ShadingParams = ShadingParams(),
) -> list[torch.Tensor]:
    """Render a dict of channel-first map tensors under every light."""
    for kind in (MapKind.BASECOLOR, MapKind.NORMAL, MapKind.ROUGHNESS):
        if kind not in maps:
            raise MissingMap(f"rendering needs a {kind.value} map")
    return [
        render_maps(
            maps[MapKind.BASECOLOR],
            maps[MapKind.NORMAL],
            maps[MapKind.ROUGHNESS],
            maps.get(MapKind.METALLIC),
            light,
            shading,
        )
        for light in lights
    ]


def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)
