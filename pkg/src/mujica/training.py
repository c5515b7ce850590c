"""Desk-scale training loop for the adapter.

The SISR path is first fitted briefly on generic images (standing in for a
pre-trained model), frozen, and then only the adapter is optimised with Lion
against the render + material objective.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

from .adapter import MujicaModel
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import LossReport, PerceptualExtractor, charbonnier, total_loss
from .material_io import (
    DatasetIndex,
    MapKind,
    MaterialSet,
    bicubic_resample,
    crop_set,
    load_material_set,
    random_crop_pair,
    resample_set,
)
from .model import ModelConfig
from .renderer import LightSet, fibonacci_hemisphere
from .synthetic import synthetic_image

__all__ = [
    "TrainConfig",
    "lr_at",
    "lion_step",
    "Lion",
    "MaterialPairs",
    "set_to_tensors",
    "batch_loss",
    "train_step",
    "TrainingDiverged",
    "warmup_sisr",
    "build_model",
    "save_model",
    "load_model",
    "Trainer",
    "run_training",
]

log = logging.getLogger(__name__)

RENDER_KINDS = (MapKind.BASECOLOR, MapKind.NORMAL, MapKind.ROUGHNESS)


@dataclass
class TrainConfig:
    epochs: int = 1
    steps: int = 0
    batch: int = 2
    patch: int = 64
    lr0: float = 1e-4
    schedule_fractions: tuple[float, ...] = (0.35, 0.6, 0.75, 0.9)
    seed: int = 0
    lights_n: int = 6
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    crops_per_material: int = 1
    checkpoint_every: int = 0
    perceptual_seed: int = 0
    warmup_steps: int = 300
    warmup_lr: float = 1e-3
    warmup_batch: int = 4
    warmup_patch: int = 32
    warmup_source: str = "synthetic"

    def __post_init__(self) -> None:
        self.schedule_fractions = tuple(float(f) for f in self.schedule_fractions)
        self.betas = tuple(float(b) for b in self.betas)
        fr = self.schedule_fractions
        if any(not 0.0 < f < 1.0 for f in fr) or any(b <= a for a, b in zip(fr, fr[1:])):
            raise ValueError("schedule_fractions must be strictly increasing inside (0, 1)")
        if self.batch < 1:
            raise ValueError("batch must be at least 1")
        if self.lights_n < 1:
            raise ValueError("lights_n must be at least 1")
        if len(self.betas) != 2:
            raise ValueError("betas must hold two values")
        if self.warmup_source not in ("synthetic", "dataset"):
            raise ValueError("warmup_source must be 'synthetic' or 'dataset'")

    def total_steps(self, n_materials: int) -> int:
        if self.steps > 0:
            return self.steps
        per_epoch = max(1, math.ceil(n_materials * self.crops_per_material / self.batch))
        return self.epochs * per_epoch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule_fractions"] = list(self.schedule_fractions)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown train config key(s): {', '.join(sorted(unknown))}")
        return cls(**data)


def lr_at(step: int, total_steps: int, lr0: float, fractions: Sequence[float] = (0.35, 0.6, 0.75, 0.9)) -> float:
    """Step-wise schedule: ``lr0`` halved once for every fraction threshold passed."""
    progress = step / total_steps
    k = sum(1 for f in fractions if f <= progress)
    return lr0 * 0.5 ** k


@torch.no_grad()
def lion_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    momenta: Sequence[torch.Tensor],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.99,
    weight_decay: float = 0.0,
) -> None:
    """In-place Lion update.

    u = sign(b1*m + (1-b1)*g);  p <- p - lr*(u + wd*p);  m <- b2*m + (1-b2)*g
    """
    for p, g, m in zip(params, grads, momenta, strict=True):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError(f"shape mismatch: param {tuple(p.shape)}, grad {tuple(g.shape)}, momentum {tuple(m.shape)}")
        u = torch.sign(beta1 * m + (1.0 - beta1) * g)
        p.sub_(lr * (u + weight_decay * p))
        m.mul_(beta2).add_(g, alpha=1.0 - beta2)


class Lion(torch.optim.Optimizer):
    def __init__(self, params: Iterable, lr: float = 1e-4, betas=(0.9, 0.99), weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be nonnegative")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), weight_decay=weight_decay))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            ps, gs, ms = [], [], []
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if "exp_avg" not in state:
                    state["exp_avg"] = torch.zeros_like(p)
                ps.append(p)
                gs.append(p.grad)
                ms.append(state["exp_avg"])
            b1, b2 = group["betas"]
            lion_step(ps, gs, ms, group["lr"], b1, b2, group["weight_decay"])
        return loss


# --------------------------------------------------------------------------
# Data
# --------------------------------------------------------------------------


def set_to_tensors(material: MaterialSet, kinds: "Iterable | None" = None) -> dict[MapKind, torch.Tensor]:
    kinds = material.kinds() if kinds is None else [MapKind.parse(k) for k in kinds]
    return {k: torch.from_numpy(np.ascontiguousarray(material[k].pixels.transpose(2, 0, 1))) for k in kinds}


def _stack(sets: Sequence[MaterialSet], kinds) -> dict[MapKind, torch.Tensor]:
    return {k: torch.stack([set_to_tensors(s, [k])[k] for s in sets]) for k in kinds}


class MaterialPairs:
    """HR materials with their bicubic LR counterparts, cropped on demand."""

    def __init__(self, materials: Sequence[MaterialSet], scale: int, required: Iterable = RENDER_KINDS):
        if not materials:
            raise ValueError("dataset is empty")
        self.scale = scale
        self.hr: list[MaterialSet] = []
        self.lr: list[MaterialSet] = []
        for mat in materials:
            mat.require(required)
            h, w = mat.resolution
            mat = crop_set(mat, 0, 0, h - h % scale, w - w % scale)
            self.hr.append(mat)
            self.lr.append(resample_set(mat, 1.0 / scale))
        self.kinds = sorted(set.intersection(*(set(m.kinds()) for m in self.hr)), key=list(MapKind).index)

    @classmethod
    def from_index(cls, dataset: DatasetIndex, scale: int, required: Iterable = RENDER_KINDS) -> "MaterialPairs":
        mats = []
        for name, path in dataset:
            mat = load_material_set(path, required=required)
            lr_dir = Path(path) / f"lr_x{scale}"
            pairs_lr = load_material_set(lr_dir) if lr_dir.is_dir() else None
            mat.name = name
            mats.append((mat, pairs_lr))
        obj = cls([m for m, _ in mats], scale, required)
        for i, (_, lr) in enumerate(mats):
            if lr is not None and lr.resolution == tuple(d // scale for d in obj.hr[i].resolution):
                obj.lr[i] = lr
        return obj

    def __len__(self) -> int:
        return len(self.hr)

    def batch(self, step: int, batch: int, patch: int, seed: int):
        """Deterministic batch for ``step``: ``(lr_tensors, hr_tensors)``."""
        rng = np.random.default_rng([seed, step])
        lrs, hrs = [], []
        for _ in range(batch):
            i = int(rng.integers(len(self.hr)))
            hr, lr, _ = random_crop_pair(self.hr[i], self.lr[i], patch, self.scale, rng)
            lrs.append(lr)
            hrs.append(hr)
        return _stack(lrs, self.kinds), _stack(hrs, self.kinds)


# --------------------------------------------------------------------------
# Model setup
# --------------------------------------------------------------------------


def warmup_sisr(
    model: MujicaModel,
    steps: int,
    lr: float = 1e-3,
    batch: int = 4,
    patch: int = 32,
    seed: int = 0,
    pairs: "MaterialPairs | None" = None,
) -> list[float]:
    """Briefly fit the SISR path as a plain single-image upscaler, then freeze it."""
    scale = model.cfg.scale
    params = list(model.sisr.parameters())
    for p in params:
        p.requires_grad_(True)
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    model.train()
    for step in range(steps):
        rng = np.random.default_rng([seed, 1_000_003, step])
        if pairs is None:
            hr = [synthetic_image(patch * scale, rng) for _ in range(batch)]
            lr_img = [bicubic_resample(h, 1.0 / scale) for h in hr]
            hr_t = torch.from_numpy(np.stack(hr).transpose(0, 3, 1, 2).astype(np.float32))
            lr_t = torch.from_numpy(np.stack(lr_img).transpose(0, 3, 1, 2).astype(np.float32))
        else:
            lr_maps, hr_maps = pairs.batch(step, batch, patch, seed + 7919)
            kinds = list(lr_maps)
            lr_t = torch.cat([lr_maps[k] for k in kinds])
            hr_t = torch.cat([hr_maps[k] for k in kinds])
        loss = charbonnier(model.sisr(lr_t), hr_t)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        losses.append(loss.item())
    model.freeze_sisr()
    return losses


def build_model(cfg: ModelConfig, tcfg: TrainConfig, pairs: "MaterialPairs | None" = None) -> MujicaModel:
    """Fresh model: warm the SISR path, freeze it, identity-initialise the FFE stacks."""
    torch.manual_seed(tcfg.seed)
    model = MujicaModel(cfg)
    if tcfg.warmup_steps > 0:
        warmup_sisr(
            model,
            tcfg.warmup_steps,
            tcfg.warmup_lr,
            tcfg.warmup_batch,
            tcfg.warmup_patch,
            tcfg.seed,
            pairs if tcfg.warmup_source == "dataset" else None,
        )
    model.freeze_sisr()
    model.init_ffe_from_backbone()
    return model


def save_model(
    path: "str | os.PathLike",
    model: MujicaModel,
    tcfg: "TrainConfig | None" = None,
    optimizer: "torch.optim.Optimizer | None" = None,
    meta: "dict | None" = None,
) -> Path:
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p, {})
                if "exp_avg" in state:
                    tensors[f"optim.exp_avg.{names[id(p)]}"] = state["exp_avg"]
    config = {"model": model.cfg.to_dict()}
    if tcfg is not None:
        config["train"] = tcfg.to_dict()
    return save_checkpoint(path, tensors, config, meta)


def load_model(path: "str | os.PathLike") -> tuple[MujicaModel, dict]:
    """Rebuild a frozen-SISR model from a checkpoint; returns ``(model, info)``.

    ``info`` holds ``model_cfg``, ``train_cfg`` (or None), ``meta`` and the raw
    optimizer momenta keyed by parameter name.
    """
    tensors, config, meta = load_checkpoint(path)
    cfg = ModelConfig.from_dict(config["model"])
    model = MujicaModel(cfg)
    state = {k: v for k, v in tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(state)
    model.freeze_sisr()
    momenta = {k[len("optim.exp_avg."):]: v for k, v in tensors.items() if k.startswith("optim.exp_avg.")}
    tcfg = TrainConfig.from_dict(config["train"]) if "train" in config else None
    return model, {"model_cfg": cfg, "train_cfg": tcfg, "meta": meta, "momenta": momenta}


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, report: "LossReport | None" = None):
        super().__init__(message)
        self.report = report


def sr_render_set(model: MujicaModel, sr: Mapping, hr: Mapping) -> dict:
    """SR maps where the model produced them, ground truth for everything else."""
    full = {MapKind.parse(k): v for k, v in hr.items()}
    full.update({MapKind.parse(k): v for k, v in sr.items()})
    return full


def batch_loss(
    model: MujicaModel, lr_maps: Mapping, hr_maps: Mapping, lights: LightSet, extractor: PerceptualExtractor
) -> tuple[torch.Tensor, LossReport]:
    """Training objective on one batch, in training mode (unclamped outputs)."""
    model.train()
    sr = model(lr_maps, clamp=False)
    fused = model.cfg.fused_kinds
    return total_loss(
        {k: sr[k.value] for k in fused},
        hr_maps,
        lights,
        extractor,
        kinds=fused,
        render_sr=sr_render_set(model, sr, hr_maps),
    )


def train_step(
    model: MujicaModel,
    optimizer: torch.optim.Optimizer,
    lr_maps: Mapping,
    hr_maps: Mapping,
    lights: LightSet,
    extractor: PerceptualExtractor,
    lr: "float | None" = None,
    grad_clip: float = 1.0,
) -> LossReport:
    """One adapter update: forward, total loss, backward, clipped Lion step."""
    if not model.sisr.frozen:
        raise RuntimeError("the SISR path must be frozen before adapter training")
    loss, report = batch_loss(model, lr_maps, hr_maps, lights, extractor)
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss.item()}", report)
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    params = [p for g in optimizer.param_groups for p in g["params"] if p.grad is not None]
    if grad_clip and grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(params, grad_clip)
    optimizer.step()
    return report


class Trainer:
    """Holds the model, optimizer and loss machinery for a run."""

    def __init__(
        self,
        model: MujicaModel,
        tcfg: TrainConfig,
        pairs: MaterialPairs,
        extractor: "PerceptualExtractor | None" = None,
        lights: "LightSet | None" = None,
    ):
        self.model = model
        self.cfg = tcfg
        self.pairs = pairs
        self.extractor = extractor or PerceptualExtractor.random_pyramid(tcfg.perceptual_seed)
        self.lights = lights or fibonacci_hemisphere(tcfg.lights_n)
        self.optimizer = Lion(model.adapter.parameters(), lr=tcfg.lr0, betas=tcfg.betas, weight_decay=tcfg.weight_decay)
        self.step = 0
        self.total_steps = tcfg.total_steps(len(pairs))

    def restore_momenta(self, momenta: Mapping[str, torch.Tensor]) -> None:
        params = dict(self.model.named_parameters())
        for name, m in momenta.items():
            self.optimizer.state[params[name]]["exp_avg"] = m.clone()

    def current_lr(self) -> float:
        return lr_at(self.step, self.total_steps, self.cfg.lr0, self.cfg.schedule_fractions)

    def run_step(self) -> tuple[float, LossReport]:
        lr_maps, hr_maps = self.pairs.batch(self.step, self.cfg.batch, self.cfg.patch, self.cfg.seed)
        lr = self.current_lr()
        report = train_step(
            self.model, self.optimizer, lr_maps, hr_maps, self.lights, self.extractor, lr, self.cfg.grad_clip
        )
        self.step += 1
        return lr, report

    def save(self, path: "str | os.PathLike") -> Path:
        return save_model(
            path,
            self.model,
            self.cfg,
            self.optimizer,
            {"step": self.step, "total_steps": self.total_steps, "lights": json.loads(self.lights.to_json())},
        )


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))


def run_training(
    dataset: "DatasetIndex | MaterialPairs",
    model_cfg: ModelConfig,
    tcfg: TrainConfig,
    out_dir: "str | os.PathLike",
    resume: "str | os.PathLike | None" = None,
    stop_after: "int | None" = None,
) -> tuple[Path, Path]:
    """Train the adapter and write ``checkpoint.mujica`` plus ``train_log.jsonl`` under ``out_dir``.

    ``stop_after`` ends the run early at that global step (the checkpoint is
    still written), which is how interrupted runs are emulated.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.mujica"
    log_path = out_dir / "train_log.jsonl"
    _seed_everything(tcfg.seed)

    if isinstance(dataset, MaterialPairs):
        pairs = dataset
    else:
        if len(dataset) == 0:
            raise ValueError("dataset split is empty")
        pairs = MaterialPairs.from_index(dataset, model_cfg.scale)

    if resume is not None:
        model, info = load_model(resume)
        if info["model_cfg"].to_dict() != model_cfg.to_dict():
            raise ValueError("resume checkpoint was trained with a different model config")
        trainer = Trainer(model, tcfg, pairs)
        trainer.restore_momenta(info["momenta"])
        trainer.step = int(info["meta"].get("step", 0))
        mode = "a"
    else:
        model = build_model(model_cfg, tcfg, pairs)
        trainer = Trainer(model, tcfg, pairs)
        mode = "w"

    end = trainer.total_steps if stop_after is None else min(stop_after, trainer.total_steps)
    with open(log_path, mode) as fh:
        while trainer.step < end:
            try:
                lr, report = trainer.run_step()
            except TrainingDiverged as exc:
                trainer.save(out_dir / "diverged.mujica")
                log.error("training diverged at step %d: %s", trainer.step, exc)
                raise
            fh.write(report.to_json(step=trainer.step, lr=lr) + "\n")
            fh.flush()
            if tcfg.checkpoint_every and trainer.step % tcfg.checkpoint_every == 0:
                trainer.save(ckpt_path)
    trainer.save(ckpt_path)
    return ckpt_path, log_path
