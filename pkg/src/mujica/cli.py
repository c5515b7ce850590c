"""Command line front-end: ``mujica {prepare,train,upscale,render,eval,synth}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

log = logging.getLogger("mujica")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
PATH_KEYS = ("dataset", "out")


class ConfigError(ValueError):
    pass


def _threads() -> None:
    import torch

    n = os.environ.get("MUJICA_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def load_config(path: "str | None", overrides: dict):
    """Split a flat JSON config (plus flag overrides) into model/train configs and paths."""
    from .model import ModelConfig
    from .training import TrainConfig

    data = {}
    if path:
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
    data.update({k: v for k, v in overrides.items() if v is not None})
    model_keys = {f.name for f in fields(ModelConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(data) - model_keys - train_keys - set(PATH_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    try:
        mcfg = ModelConfig(**{k: v for k, v in data.items() if k in model_keys})
        tcfg = TrainConfig(**{k: v for k, v in data.items() if k in train_keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    paths = {k: data.get(k) for k in PATH_KEYS}
    return mcfg, tcfg, paths


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_prepare(args) -> int:
    from .material_io import MaterialError, load_material_set, resample_set, save_material_set, scan_dataset

    index = scan_dataset(args.root)
    if len(index) == 0:
        log.error("no material directories under %s", args.root)
        return EXIT_INVALID
    failures = 0
    for name, path in index:
        try:
            hr = load_material_set(path)
        except MaterialError as exc:
            log.error("%s: %s", name, exc)
            failures += 1
            continue
        for s in args.scales:
            try:
                lr = resample_set(hr, 1.0 / s)
            except ValueError as exc:
                log.error("%s x%d: %s", name, s, exc)
                failures += 1
                continue
            save_material_set(lr, Path(path) / f"lr_x{s}", bits=16)
            log.info("%s: wrote lr_x%d (%dx%d)", name, s, *lr.resolution)
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_train(args) -> int:
    from .material_io import scan_dataset
    from .plotting import plot_training_curve
    from .training import run_training

    mcfg, tcfg, paths = load_config(
        args.config,
        {"seed": args.seed, "steps": args.steps, "dataset": args.dataset, "out": args.out},
    )
    if not paths["dataset"]:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    out = Path(paths["out"] or "runs/train")
    index = scan_dataset(paths["dataset"], "train")
    if len(index) == 0:
        raise ConfigError(f"dataset {paths['dataset']} has no training materials")
    ckpt, log_path = run_training(index, mcfg, tcfg, out, resume=args.resume)
    (out / "config.json").write_text(json.dumps({**mcfg.to_dict(), **tcfg.to_dict()}, indent=2))
    if not args.no_figures:
        plot_training_curve(log_path, out / "training_curve.png")
    print(ckpt)
    return EXIT_OK


def cmd_upscale(args) -> int:
    from .inference import upscale_material
    from .material_io import load_material_set, save_material_set
    from .training import load_model

    model, _ = load_model(args.checkpoint)
    if args.scale is not None and args.scale != model.cfg.scale:
        raise ConfigError(f"checkpoint upscales x{model.cfg.scale}, not x{args.scale}")
    lr = load_material_set(args.material, required=model.cfg.fused_kinds)
    sr = upscale_material(model, lr, tile=args.tile, overlap=args.tile_overlap)
    save_material_set(sr, args.out, bits=args.bits)
    log.info("wrote %d maps at %dx%d to %s", len(sr.maps), *sr.resolution, args.out)
    return EXIT_OK


def _write_rgb(path: Path, img: np.ndarray, srgb: bool) -> None:
    import cv2

    from .renderer import linear_to_srgb

    img = linear_to_srgb(img) if srgb else np.clip(img, 0.0, 1.0)
    data = np.floor(img * 255.0 + 0.5).astype(np.uint8)[..., ::-1]
    if not cv2.imwrite(str(path), np.ascontiguousarray(data)):
        raise OSError(f"failed to write {path}")


def cmd_render(args) -> int:
    from .material_io import load_material_set
    from .renderer import LightSet, ShadingParams, fibonacci_hemisphere, render_set

    if args.light_file:
        try:
            lights = LightSet.load(args.light_file)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"bad light file {args.light_file}: {exc}") from exc
    else:
        lights = fibonacci_hemisphere(args.lights)
    mat = load_material_set(args.material)
    images = render_set(mat, lights, ShadingParams(exposure=args.exposure))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(images):
        _write_rgb(out / f"render_L{i}.png", img, args.srgb)
    (out / "lights.json").write_text(lights.to_json())
    log.info("wrote %d renders to %s", len(images), out)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .evaluation import evaluate_model, write_reports
    from .material_io import save_material_set, scan_dataset
    from .plotting import plot_consistency, plot_render_grid
    from .renderer import fibonacci_hemisphere
    from .training import load_model

    model, _ = load_model(args.checkpoint)
    index = scan_dataset(args.dataset, args.split)
    if len(index) == 0:
        raise ConfigError(f"dataset {args.dataset} has no {args.split} materials")
    lights = fibonacci_hemisphere(args.lights)
    results = evaluate_model(
        model,
        index,
        lights,
        crop=args.crop,
        seed=args.seed,
        gt_substitute=args.gt_substitute,
        baseline=args.baseline == "bicubic",
        tile=args.tile,
        tile_overlap=args.tile_overlap,
        keep_renders=True,
    )
    out = Path(args.out)
    reports = [r for r, _ in results]
    write_reports(reports, out)
    figs = out / "figures"
    figs.mkdir(parents=True, exist_ok=True)
    for report, sr in results:
        mdir = out / report.material
        save_material_set(sr, mdir / "sr")
        for i, img in enumerate(report.render["renders"]["sr"]):
            _write_rgb(mdir / f"render_L{i}.png", img, srgb=True)
        if args.figures:
            d = report.to_dict()
            plot_consistency(d, figs / f"{report.material}_consistency.png")
            cols = {"GT": report.render["renders"]["gt"], "model": report.render["renders"]["sr"]}
            if report.baseline:
                cols["bicubic"] = report.baseline["render"]["renders"]["sr"]
            pick = np.linspace(0, len(lights) - 1, min(3, len(lights))).round().astype(int)
            plot_render_grid({k: [v[i] for i in pick] for k, v in cols.items()}, figs / f"{report.material}_renders.png")
    summary = {
        r.material: {
            "render_psnr": r.render["psnr_mean"],
            "render_psnr_std": r.render["psnr_std"],
            **{f"delta_{k}": v for k, v in (r.deltas or {}).items()},
        }
        for r in reports
    }
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    from .material_io import save_material_set
    from .synthetic import synthetic_material

    out = Path(args.out)
    for i in range(args.count):
        mat = synthetic_material(args.size, seed=args.seed + i, metallic=args.metallic)
        save_material_set(mat, out / f"material_{i:03d}", bits=16)
    log.info("wrote %d synthetic materials to %s", args.count, out)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mujica", description="Joint super-resolution of PBR material maps.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="write bicubic LR trees next to each HR material")
    sp.add_argument("root")
    sp.add_argument("--scales", type=int, nargs="+", default=[2, 4], choices=[2, 4])
    sp.set_defaults(func=cmd_prepare)

    sp = sub.add_parser("train", help="train the adapter")
    sp.add_argument("--config")
    sp.add_argument("--dataset")
    sp.add_argument("--out")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume")
    sp.add_argument("--no-figures", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("upscale", help="super-resolve one LR material")
    sp.add_argument("material")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scale", type=int, choices=[2, 4])
    sp.add_argument("--tile", type=int)
    sp.add_argument("--tile-overlap", type=int, default=8)
    sp.add_argument("--bits", type=int, choices=[8, 16], default=8)
    sp.set_defaults(func=cmd_upscale)

    sp = sub.add_parser("render", help="render a material under point lights")
    sp.add_argument("material")
    sp.add_argument("--out", required=True)
    grp = sp.add_mutually_exclusive_group()
    grp.add_argument("--lights", type=int, default=6)
    grp.add_argument("--light-file")
    sp.add_argument("--exposure", type=float, default=1.0)
    sp.add_argument("--srgb", action="store_true", help="sRGB-encode the preview PNGs")
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("eval", help="score a checkpoint against HR materials")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", default="test", choices=["train", "val", "test"])
    sp.add_argument("--lights", type=int, default=6)
    sp.add_argument("--crop", type=int, help="evaluate one LR crop of this size per material")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--gt-substitute", dest="gt_substitute", action="store_true", default=True)
    sp.add_argument("--no-gt-substitute", dest="gt_substitute", action="store_false")
    sp.add_argument("--baseline", choices=["bicubic", "none"], default="bicubic")
    sp.add_argument("--tile", type=int)
    sp.add_argument("--tile-overlap", type=int, default=8)
    sp.add_argument("--no-figures", dest="figures", action="store_false")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("synth", help="write procedural demo materials")
    sp.add_argument("out")
    sp.add_argument("--count", type=int, default=1)
    sp.add_argument("--size", type=int, default=256)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--metallic", action="store_true")
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    from .checkpoint import CheckpointError
    from .material_io import MaterialError

    _threads()
    try:
        return args.func(args)
    except (ConfigError, MaterialError, CheckpointError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
