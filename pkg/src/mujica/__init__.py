"""Cross-map window attention adapter for joint super-resolution of PBR material maps."""

from .adapter import MujicaModel
from .evaluation import consistency_report, evaluate_model, psnr, ssim
from .inference import upscale_material
from .losses import PerceptualExtractor, total_loss
from .material_io import MapKind, MaterialSet, load_material_set, save_material_set
from .model import ModelConfig
from .renderer import LightSet, fibonacci_hemisphere, render_set
from .training import TrainConfig, load_model, run_training

__version__ = "0.1.0"

__all__ = [
    "MujicaModel",
    "ModelConfig",
    "TrainConfig",
    "MapKind",
    "MaterialSet",
    "LightSet",
    "PerceptualExtractor",
    "load_material_set",
    "save_material_set",
    "fibonacci_hemisphere",
    "render_set",
    "total_loss",
    "run_training",
    "load_model",
    "upscale_material",
    "evaluate_model",
    "consistency_report",
    "psnr",
    "ssim",
]
