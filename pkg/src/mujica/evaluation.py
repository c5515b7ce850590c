"""Image-quality metrics and evaluation reports.

All metrics operate on linear ``[0, 1]`` arrays shaped ``H x W x C``.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .material_io import (
    DatasetIndex,
    MapKind,
    MaterialSet,
    crop_set,
    load_material_set,
    random_crop_pair,
    resample_set,
)
from .renderer import LightSet, ShadingParams, fibonacci_hemisphere, render_set

__all__ = [
    "PSNR_CAP",
    "psnr",
    "gaussian_window",
    "ssim",
    "consistency_report",
    "MetricsReport",
    "evaluate_material",
    "evaluate_model",
    "write_reports",
]

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    """Normalised 1-D Gaussian taps; the 2-D window is its outer product."""
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    r = len(taps) // 2
    out = ndimage.correlate1d(img, taps, axis=0, mode="constant")
    out = ndimage.correlate1d(out, taps, axis=1, mode="constant")
    return out[r:img.shape[0] - r, r:img.shape[1] - r]


def ssim(a: np.ndarray, b: np.ndarray, size: int = 11, sigma: float = 1.5, data_range: float = 1.0) -> float:
    """Mean SSIM over channels and all positions where the window fits inside the image."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < size:
        raise ValueError(f"image {a.shape[:2]} smaller than the {size}x{size} SSIM window")
    taps = gaussian_window(size, sigma)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, taps), _filter_valid(y, taps)
        sxx = _filter_valid(x * x, taps) - mx * mx
        syy = _filter_valid(y * y, taps) - my * my
        sxy = _filter_valid(x * y, taps) - mx * my
        num = (2.0 * mx * my + c1) * (2.0 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(num / den)
    return float(np.mean(vals))


def consistency_report(
    sr: MaterialSet,
    gt: MaterialSet,
    lights: LightSet,
    shading: ShadingParams = ShadingParams(),
    renders: bool = False,
) -> dict:
    """Per-light render PSNR/SSIM plus the spread of PSNR across lights.

    The spread (population std of per-light PSNR) is a proxy for lighting
    consistency: low spread means errors do not depend on light direction.
    """
    if len(lights) < 2:
        raise ValueError("a consistency report needs at least two lights")
    r_sr = render_set(sr, lights, shading)
    r_gt = render_set(gt, lights, shading)
    rows = []
    for i, (a, b) in enumerate(zip(r_sr, r_gt)):
        row = {"light": i, "direction": list(lights[i].direction), "psnr": psnr(a, b)}
        row["ssim"] = ssim(a, b) if min(a.shape[:2]) >= 11 else float("nan")
        rows.append(row)
    ps = np.array([r["psnr"] for r in rows])
    out = {
        "lights": rows,
        "psnr_mean": float(ps.mean()),
        "ssim_mean": float(np.mean([r["ssim"] for r in rows])),
        "psnr_std": float(ps.std()),
    }
    if renders:
        out["renders"] = {"sr": r_sr, "gt": r_gt}
    return out


@dataclass
class MetricsReport:
    material: str
    maps: dict = field(default_factory=dict)
    render: dict = field(default_factory=dict)
    baseline: "dict | None" = None
    deltas: "dict | None" = None
    perceptual: "float | None" = None

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["render"]:
            d["render"] = {k: v for k, v in d["render"].items() if k != "renders"}
        if d["baseline"] and "render" in d["baseline"]:
            d["baseline"]["render"] = {k: v for k, v in d["baseline"]["render"].items() if k != "renders"}
        return d


def _map_metrics(sr: MaterialSet, gt: MaterialSet, kinds: Iterable[MapKind]) -> dict:
    out = {}
    for k in kinds:
        a, b = sr[k].pixels, gt[k].pixels
        out[k.value] = {"psnr": psnr(a, b), "ssim": ssim(a, b) if min(a.shape[:2]) >= 11 else float("nan")}
    return out


def _render_set(sr: MaterialSet, gt: MaterialSet, hr_fallback: MaterialSet, sr_kinds, gt_substitute: bool) -> MaterialSet:
    maps = {}
    for k in gt.kinds():
        if k in sr_kinds:
            maps[k] = sr[k]
        elif gt_substitute:
            maps[k] = gt[k]
        else:
            maps[k] = hr_fallback[k]
    return MaterialSet(maps, name=gt.name)


def evaluate_material(
    sr: MaterialSet,
    gt: MaterialSet,
    lr: MaterialSet,
    sr_kinds: Sequence[MapKind],
    lights: LightSet,
    scale: int,
    gt_substitute: bool = True,
    baseline: bool = True,
    shading: ShadingParams = ShadingParams(),
    keep_renders: bool = False,
) -> MetricsReport:
    """Metrics for one material, optionally alongside a bicubic upscale of the same LR input."""
    sr_kinds = [MapKind.parse(k) for k in sr_kinds]
    bicubic = resample_set(lr, float(scale))
    report = MetricsReport(material=gt.name)
    report.maps = _map_metrics(sr, gt, sr_kinds)
    report.render = consistency_report(
        _render_set(sr, gt, bicubic, sr_kinds, gt_substitute), gt, lights, shading, keep_renders
    )
    if baseline:
        report.baseline = {
            "method": "bicubic",
            "maps": _map_metrics(bicubic, gt, sr_kinds),
            "render": consistency_report(
                _render_set(bicubic, gt, bicubic, sr_kinds, gt_substitute), gt, lights, shading, keep_renders
            ),
        }
        report.deltas = {
            "render_psnr": report.render["psnr_mean"] - report.baseline["render"]["psnr_mean"],
            "render_ssim": report.render["ssim_mean"] - report.baseline["render"]["ssim_mean"],
            **{
                f"{k}_psnr": report.maps[k]["psnr"] - report.baseline["maps"][k]["psnr"]
                for k in report.maps
            },
        }
    return report


def evaluate_model(
    model,
    dataset: "DatasetIndex | Sequence[MaterialSet]",
    lights: "LightSet | None" = None,
    crop: "int | None" = None,
    seed: int = 0,
    gt_substitute: bool = True,
    baseline: bool = True,
    tile: "int | None" = None,
    tile_overlap: int = 8,
    keep_renders: bool = False,
) -> list[tuple[MetricsReport, MaterialSet]]:
    """Downsample each HR material, super-resolve it and score it.

    With ``crop`` set, an LR patch of that size is drawn per material from a
    ``(seed, index)`` stream; the bicubic baseline is scored on the same patch.
    Returns ``(report, sr_material)`` pairs.
    """
    from .inference import upscale_material

    scale = model.cfg.scale
    lights = lights or fibonacci_hemisphere(6)
    if isinstance(dataset, DatasetIndex):
        materials = []
        for name, path in dataset:
            m = load_material_set(path, required=model.cfg.sr_kinds)
            m.name = name
            materials.append(m)
    else:
        materials = list(dataset)
    results = []
    for i, hr in enumerate(materials):
        h, w = hr.resolution
        hr = crop_set(hr, 0, 0, h - h % scale, w - w % scale)
        lr = resample_set(hr, 1.0 / scale)
        if crop is not None:
            hr, lr, _ = random_crop_pair(hr, lr, crop, scale, np.random.default_rng([seed, i]))
        sr = upscale_material(model, lr, tile=tile, overlap=tile_overlap)
        sr_full = MaterialSet({**{k: hr[k] for k in hr.kinds()}, **sr.maps}, name=hr.name)
        report = evaluate_material(
            sr_full, hr, lr, [k for k in model.cfg.sr_kinds if k in sr.maps], lights, scale,
            gt_substitute, baseline, keep_renders=keep_renders,
        )
        results.append((report, sr))
    return results


def write_reports(reports: Sequence[MetricsReport], out_dir: "str | os.PathLike") -> tuple[Path, Path]:
    """``metrics.json`` with full reports and ``metrics.csv`` with one row per material and light."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    js = out_dir / "metrics.json"
    js.write_text(json.dumps([r.to_dict() for r in reports], indent=2))
    cs = out_dir / "metrics.csv"
    with open(cs, "w", newline="") as fh:
        wr = csv.writer(fh)
        header = ["material", "target", "index", "psnr", "ssim", "baseline_psnr", "baseline_ssim"]
        wr.writerow(header)
        for r in reports:
            base = r.baseline or {}
            for k, v in r.maps.items():
                b = base.get("maps", {}).get(k, {})
                wr.writerow([r.material, k, "", v["psnr"], v["ssim"], b.get("psnr", ""), b.get("ssim", "")])
            brows = base.get("render", {}).get("lights", [])
            for j, row in enumerate(r.render["lights"]):
                b = brows[j] if j < len(brows) else {}
                wr.writerow([r.material, "render", row["light"], row["psnr"], row["ssim"], b.get("psnr", ""), b.get("ssim", "")])
            b = base.get("render", {})
            wr.writerow([r.material, "render_psnr_std", "", r.render["psnr_std"], "", b.get("psnr_std", ""), ""])
    return js, cs
