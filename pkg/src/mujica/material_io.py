"""Loading, saving and resampling of PBR material map sets.

A material lives in one directory holding ``<kind>.png`` files, e.g.
``bricks/basecolor.png``, ``bricks/normal.png``.  All maps are kept in memory
as float32 ``H x W x 3`` arrays in ``[0, 1]``; gray maps (roughness,
metallic) are replicated to three equal channels.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

__all__ = [
    "MapKind",
    "MaterialMap",
    "MaterialSet",
    "DatasetIndex",
    "Split",
    "MaterialError",
    "MissingMap",
    "ResolutionMismatch",
    "UnreadableFile",
    "load_material_set",
    "save_material_set",
    "decode_normal",
    "cubic_kernel",
    "resample_weights",
    "bicubic_resample",
    "resample_set",
    "random_crop_pair",
    "crop_set",
    "scan_dataset",
]

ALLOWED_SCALES = (0.25, 0.5, 1.0, 2.0, 4.0)
# encoded normals shorter than this (e.g. mid-gray pixels) carry no direction
MIN_NORMAL_LENGTH = 0.05


class MaterialError(Exception):
    """Base class for material loading and validation failures."""


class MissingMap(MaterialError):
    pass


class ResolutionMismatch(MaterialError):
    pass


class UnreadableFile(MaterialError):
    pass


class MapKind(str, enum.Enum):
    BASECOLOR = "basecolor"
    NORMAL = "normal"
    ROUGHNESS = "roughness"
    METALLIC = "metallic"

    @property
    def is_gray(self) -> bool:
        return self in (MapKind.ROUGHNESS, MapKind.METALLIC)

    @classmethod
    def parse(cls, value: "str | MapKind") -> "MapKind":
        if isinstance(value, MapKind):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown map kind {value!r}") from None


@dataclass
class MaterialMap:
    kind: MapKind
    pixels: np.ndarray

    def __post_init__(self) -> None:
        self.kind = MapKind.parse(self.kind)
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ValueError(f"{self.kind.value}: expected HxWx3 pixels, got {px.shape}")
        if px.shape[2] == 1:
            px = np.repeat(px, 3, axis=2)
        self.pixels = px

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[0], self.pixels.shape[1]


@dataclass
class MaterialSet:
    maps: dict[MapKind, MaterialMap]
    name: str = ""
    report: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        maps = {}
        for k, m in self.maps.items():
            kind = MapKind.parse(k)
            if not isinstance(m, MaterialMap):
                m = MaterialMap(kind, m)
            maps[kind] = m
        shapes = {m.shape for m in maps.values()}
        if len(shapes) > 1:
            raise ResolutionMismatch(f"maps of {self.name or 'material'} disagree in size: {sorted(shapes)}")
        self.maps = maps

    @property
    def resolution(self) -> tuple[int, int]:
        if not self.maps:
            return (0, 0)
        return next(iter(self.maps.values())).shape

    def __getitem__(self, kind) -> MaterialMap:
        kind = MapKind.parse(kind)
        if kind not in self.maps:
            raise MissingMap(f"{self.name or 'material'} has no {kind.value} map")
        return self.maps[kind]

    def __contains__(self, kind) -> bool:
        return MapKind.parse(kind) in self.maps

    def kinds(self) -> list[MapKind]:
        return list(self.maps)

    def require(self, kinds: Iterable) -> None:
        missing = [MapKind.parse(k).value for k in kinds if MapKind.parse(k) not in self.maps]
        if missing:
            raise MissingMap(f"{self.name or 'material'} is missing map(s): {', '.join(missing)}")

    def pixels(self, kind) -> np.ndarray:
        return self[kind].pixels

    def replace(self, **pixels: np.ndarray) -> "MaterialSet":
        """Copy of this set with some maps swapped for new pixel arrays."""
        maps = dict(self.maps)
        for k, px in pixels.items():
            kind = MapKind.parse(k)
            maps[kind] = MaterialMap(kind, px)
        return MaterialSet(maps, name=self.name)

    def subset(self, kinds: Iterable) -> "MaterialSet":
        self.require(kinds)
        return MaterialSet({MapKind.parse(k): self.maps[MapKind.parse(k)] for k in kinds}, name=self.name)


# --------------------------------------------------------------------------
# PNG I/O
# --------------------------------------------------------------------------


def _read_png(path: Path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise UnreadableFile(f"cannot read image {path}")
    if img.dtype == np.uint8:
        scale = 255.0
    elif img.dtype == np.uint16:
        scale = 65535.0
    else:
        raise UnreadableFile(f"{path}: unsupported sample type {img.dtype}")
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[..., :3]
        img = img[..., ::-1]  # BGR -> RGB
    return img.astype(np.float64) / scale


def load_material_set(
    directory: "str | os.PathLike",
    required: Iterable = (),
    kinds: Iterable = tuple(MapKind),
) -> MaterialSet:
    """Load every ``<kind>.png`` found in ``directory``.

    Raises ``MissingMap`` if any of ``required`` is absent, ``ResolutionMismatch``
    if the maps disagree in size and ``UnreadableFile`` for corrupt images.
    """
    directory = Path(directory)
    if not directory.is_dir():
        raise MissingMap(f"material directory {directory} does not exist")
    maps: dict[MapKind, MaterialMap] = {}
    for kind in map(MapKind.parse, kinds):
        path = directory / f"{kind.value}.png"
        if not path.exists():
            continue
        px = _read_png(path)
        if px.ndim == 2:
            px = np.repeat(px[..., None], 3, axis=2)
        elif kind.is_gray:
            px = np.repeat(px.mean(axis=2, keepdims=True), 3, axis=2)
        maps[kind] = MaterialMap(kind, px)
    mat = MaterialSet(maps, name=directory.name)
    mat.require(required)
    if MapKind.NORMAL in maps:
        _, bad = decode_normal(maps[MapKind.NORMAL], return_degenerate=True)
        mat.report["degenerate_normals"] = int(bad)
    return mat


def _quantize(px: np.ndarray, bits: int) -> np.ndarray:
    top = 255 if bits == 8 else 65535
    q = np.floor(np.clip(px.astype(np.float64), 0.0, 1.0) * top + 0.5)
    return q.astype(np.uint8 if bits == 8 else np.uint16)


def save_material_set(material: MaterialSet, directory: "str | os.PathLike", bits: int = 8) -> list[Path]:
    """Write one PNG per map. Gray maps are stored single-channel."""
    if bits not in (8, 16):
        raise ValueError("bits must be 8 or 16")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, m in material.maps.items():
        if kind.is_gray:
            data = _quantize(m.pixels[..., 0], bits)
        else:
            data = np.ascontiguousarray(_quantize(m.pixels, bits)[..., ::-1])
        path = directory / f"{kind.value}.png"
        if not cv2.imwrite(str(path), data):
            raise OSError(f"failed to write {path}")
        written.append(path)
    return written


# --------------------------------------------------------------------------
# Normals
# --------------------------------------------------------------------------


def decode_normal(normal: "MaterialMap | np.ndarray", return_degenerate: bool = False):
    """Tangent-space decode ``normalize(2p - 1)``.

    Vectors shorter than ``MIN_NORMAL_LENGTH`` or pointing into the lower
    hemisphere (z <= 0) are replaced by ``(0, 0, 1)``.
    """
    if isinstance(normal, MaterialMap):
        if normal.kind is not MapKind.NORMAL:
            raise ValueError(f"decode_normal needs a normal map, got {normal.kind.value}")
        normal = normal.pixels
    v = 2.0 * np.asarray(normal, dtype=np.float64) - 1.0
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    bad = (norm[..., 0] < MIN_NORMAL_LENGTH) | (v[..., 2] <= 0.0)
    out = v / np.where(norm < MIN_NORMAL_LENGTH, 1.0, norm)
    out[bad] = (0.0, 0.0, 1.0)
    if return_degenerate:
        return out, int(bad.sum())
    return out


# --------------------------------------------------------------------------
# Bicubic resampling
# --------------------------------------------------------------------------


def cubic_kernel(x, a: float = -0.5):
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0
    far = a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


def resample_weights(n_in: int, n_out: int, scale: float, antialias: bool = True, a: float = -0.5) -> np.ndarray:
    """Dense ``n_out x n_in`` matrix of bicubic weights with edge clamping.

    Pixel centres are aligned (``src = (dst + 0.5) / scale - 0.5``).  When
    shrinking with ``antialias`` the kernel is stretched by ``1 / scale``.
    """
    stretch = 1.0 / scale if (antialias and scale < 1.0) else 1.0
    radius = 2.0 * stretch
    W = np.zeros((n_out, n_in))
    for j in range(n_out):
        center = (j + 0.5) / scale - 0.5
        lo = int(math.floor(center - radius))
        hi = int(math.ceil(center + radius))
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((center - taps) / stretch, a)
        w /= w.sum()
        np.add.at(W[j], np.clip(taps, 0, n_in - 1), w)
    return W


def _check_scale(h: int, w: int, scale: float) -> tuple[int, int]:
    if not any(abs(scale - s) < 1e-12 for s in ALLOWED_SCALES):
        raise ValueError(f"scale {scale} not in {ALLOWED_SCALES}")
    oh, ow = h * scale, w * scale
    if abs(oh - round(oh)) > 1e-9 or abs(ow - round(ow)) > 1e-9:
        raise ValueError(f"scale {scale} gives non-integral size for {h}x{w}")
    return int(round(oh)), int(round(ow))


def bicubic_resample(m: "MaterialMap | np.ndarray", scale: float, antialias: bool = True):
    """Resample a map (or bare HxWxC array) by ``scale``; output clamped to [0, 1]."""
    px = m.pixels if isinstance(m, MaterialMap) else np.asarray(m)
    h, w = px.shape[:2]
    oh, ow = _check_scale(h, w, scale)
    if scale == 1.0:
        out = px.copy()
    else:
        wy = resample_weights(h, oh, scale, antialias)
        wx = resample_weights(w, ow, scale, antialias)
        tmp = np.tensordot(wy, px.astype(np.float64), axes=(1, 0))
        out = np.clip(np.einsum("xw,hwc->hxc", wx, tmp), 0.0, 1.0).astype(np.float32)
    if isinstance(m, MaterialMap):
        return MaterialMap(m.kind, out)
    return out


def resample_set(material: MaterialSet, scale: float, antialias: bool = True) -> MaterialSet:
    maps = {k: bicubic_resample(m, scale, antialias) for k, m in material.maps.items()}
    return MaterialSet(maps, name=material.name)


# --------------------------------------------------------------------------
# Cropping
# --------------------------------------------------------------------------


def crop_set(material: MaterialSet, top: int, left: int, height: int, width: int) -> MaterialSet:
    maps = {
        k: MaterialMap(k, m.pixels[top:top + height, left:left + width].copy())
        for k, m in material.maps.items()
    }
    return MaterialSet(maps, name=material.name)


def random_crop_pair(
    hr: MaterialSet,
    lr: MaterialSet,
    patch: int,
    scale: int,
    rng: "np.random.Generator | int | None" = None,
) -> tuple[MaterialSet, MaterialSet, tuple[int, int]]:
    """Aligned random crop: LR ``patch^2`` at (y, x), HR ``(patch*scale)^2`` at (y*scale, x*scale).

    Returns ``(hr_crop, lr_crop, (y, x))`` with the LR offset.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    lh, lw = lr.resolution
    hh, hw = hr.resolution
    if (hh, hw) != (lh * scale, lw * scale):
        raise ResolutionMismatch(f"HR {hh}x{hw} is not LR {lh}x{lw} times {scale}")
    if patch > lh or patch > lw:
        raise ValueError(f"patch {patch} larger than LR image {lh}x{lw}")
    y = int(rng.integers(0, lh - patch + 1))
    x = int(rng.integers(0, lw - patch + 1))
    lr_crop = crop_set(lr, y, x, patch, patch)
    hr_crop = crop_set(hr, y * scale, x * scale, patch * scale, patch * scale)
    return hr_crop, lr_crop, (y, x)


# --------------------------------------------------------------------------
# Dataset index
# --------------------------------------------------------------------------


class Split(str, enum.Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


@dataclass
class DatasetIndex:
    entries: list[tuple[str, Path]]
    split: Split = Split.TRAIN

    def __post_init__(self) -> None:
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate material ids in dataset index")
        self.split = Split(self.split)
        self.entries = [(i, Path(p)) for i, p in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def _is_material_dir(path: Path) -> bool:
    return any((path / f"{k.value}.png").exists() for k in MapKind)


def scan_dataset(root: "str | os.PathLike", split: "Split | str" = Split.TRAIN) -> DatasetIndex:
    """Index material directories below ``root``.

    If ``root/index.json`` exists it maps split names to lists of material ids;
    otherwise every material directory belongs to every split.  ``root`` may
    also be a single material directory.
    """
    root = Path(root)
    split = Split(split)
    if not root.is_dir():
        raise MaterialError(f"dataset root {root} does not exist")
    index_file = root / "index.json"
    if index_file.exists():
        spec = json.loads(index_file.read_text())
        ids: Sequence[str] = spec.get(split.value, [])
        entries = [(i, root / i) for i in ids]
    elif _is_material_dir(root):
        entries = [(root.name, root)]
    else:
        entries = [(p.name, p) for p in sorted(root.iterdir()) if p.is_dir() and _is_material_dir(p)]
    return DatasetIndex(entries, split)
