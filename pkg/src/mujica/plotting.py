"""Figures written next to the JSON/CSV reports."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .renderer import linear_to_srgb  # noqa: E402

__all__ = ["report_style", "plot_consistency", "plot_render_grid", "plot_training_curve"]

_RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def report_style():
    return plt.rc_context(_RC)


def plot_consistency(report: dict, path: "str | os.PathLike", title: str = "") -> Path:
    """Per-light render PSNR for the model and (if present) the bicubic baseline."""
    render = report["render"]
    base = (report.get("baseline") or {}).get("render")
    idx = np.arange(len(render["lights"]))
    with report_style():
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        width = 0.38 if base else 0.6
        ax.bar(idx - (width / 2 if base else 0), [r["psnr"] for r in render["lights"]], width,
               label=f"model (std {render['psnr_std']:.2f} dB)", color="#3b6ea5")
        if base:
            ax.bar(idx + width / 2, [r["psnr"] for r in base["lights"]], width,
                   label=f"bicubic (std {base['psnr_std']:.2f} dB)", color="#c8a05a")
        ax.set_xticks(idx)
        ax.set_xticklabels([f"L{i}" for i in idx])
        ax.set_xlabel("light")
        ax.set_ylabel("render PSNR (dB)")
        lo = min(r["psnr"] for r in render["lights"] + (base["lights"] if base else []))
        ax.set_ylim(max(0.0, lo - 3.0), None)
        ax.set_title(title or report.get("material", ""))
        ax.legend(loc="lower right", frameon=False)
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_render_grid(
    columns: dict[str, Sequence[np.ndarray]],
    path: "str | os.PathLike",
    srgb: bool = True,
    error_ref: "str | None" = "GT",
) -> Path:
    """One row per light, one column per named render list, plus |error| columns vs ``error_ref``."""
    names = list(columns)
    n_lights = len(columns[names[0]])
    err_cols = [n for n in names if error_ref and n != error_ref and error_ref in columns]
    ncols = len(names) + len(err_cols)
    with report_style():
        fig, axes = plt.subplots(n_lights, ncols, figsize=(1.6 * ncols, 1.6 * n_lights), squeeze=False)
        for i in range(n_lights):
            col = 0
            for name in names:
                img = columns[name][i]
                axes[i, col].imshow(linear_to_srgb(img) if srgb else np.clip(img, 0, 1))
                if i == 0:
                    axes[i, col].set_title(name)
                col += 1
            for name in err_cols:
                err = np.abs(columns[name][i] - columns[error_ref][i]).mean(axis=-1)
                axes[i, col].imshow(err, cmap="magma", vmin=0.0, vmax=max(0.05, float(err.max())))
                if i == 0:
                    axes[i, col].set_title(f"|{name}-{error_ref}|")
                col += 1
            axes[i, 0].set_ylabel(f"L{i}")
        for ax in axes.ravel():
            ax.set_xticks([])
            ax.set_yticks([])
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_training_curve(log: "str | os.PathLike | Sequence[dict]", path: "str | os.PathLike") -> Path:
    if isinstance(log, (str, os.PathLike)):
        records = [json.loads(line) for line in Path(log).read_text().splitlines() if line.strip()]
    else:
        records = list(log)
    steps = [r["step"] for r in records]
    with report_style():
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for key, color in (("total", "k"), ("rec", "#3b6ea5"), ("mat", "#c8a05a")):
            ax.plot(steps, [r[key] for r in records], color=color, lw=1.2, label=key)
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.legend(frameon=False)
        path = Path(path)
        fig.savefig(path)
        plt.close(fig)
    return path
