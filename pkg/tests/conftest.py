import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))
torch.set_num_threads(1)

from mujica.material_io import MapKind, MaterialSet  # noqa: E402
from mujica.model import ModelConfig  # noqa: E402
from mujica.synthetic import synthetic_material  # noqa: E402


def tiny_cfg(**kw) -> ModelConfig:
    base = dict(channels=8, embed_dim=8, heads=2, window=4, cabs=2, growth=4, ffe_depth=1, backbone_depth=1)
    base.update(kw)
    return ModelConfig(**base)


def random_material(rng: np.random.Generator, size: int = 16, metallic: bool = False) -> MaterialSet:
    maps = {
        MapKind.BASECOLOR: rng.random((size, size, 3)),
        MapKind.NORMAL: np.concatenate([rng.random((size, size, 2)), 0.6 + 0.4 * rng.random((size, size, 1))], -1),
        MapKind.ROUGHNESS: rng.random((size, size, 1)),
    }
    if metallic:
        maps[MapKind.METALLIC] = rng.random((size, size, 1))
    return MaterialSet(maps, name="rand")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def material64():
    return synthetic_material(64, seed=5)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in range(1, 14):
        terminalreporter.write_line(mod.VERDICTS.get(n, f"criterion {n:2d}: NO VERDICT  (deselected, or raised before reaching its check)"))
