"""
Pytest configuration and fixtures for ouidecay-lab tests.
"""

import importlib.util
import os
import sys
from dataclasses import replace
from pathlib import Path
from types import ModuleType

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def _load_ouidecay_lab() -> ModuleType:
    """Load the ouidecay-lab module dynamically (handles hyphen in filename)."""
    module_path = os.path.join(
        os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "ouidecay-lab.py"
    )
    spec = importlib.util.spec_from_file_location("ouidecay_lab", module_path)
    if spec is None or spec.loader is None:
        raise ImportError(f"Could not load module from {module_path}")
    module = importlib.util.module_from_spec(spec)
    # Register in sys.modules BEFORE exec_module to fix dataclass resolution
    sys.modules["ouidecay_lab"] = module
    spec.loader.exec_module(module)
    return module


# Load module once at import time and make it available globally
_module = _load_ouidecay_lab()


@pytest.fixture
def ouidecay_lab():
    """Fixture providing access to the ouidecay_lab module."""
    return _module


def mlp_layers(hidden: int = 8, classes: int = 3, depth: int = 2):
    layers = []
    for _ in range(depth):
        layers.append(_module.LayerSpec(kind="dense", out_features=hidden))
        layers.append(_module.LayerSpec(kind="relu", monitored=True))
    layers.append(_module.LayerSpec(kind="dense", out_features=classes))
    return tuple(layers)


@pytest.fixture
def make_cfg(ouidecay_lab):
    """Factory fixture returning a small blobs/MLP RunConfig with section overrides.

    Keyword overrides are applied per section, e.g. ``make_cfg(scheduler={"mode": "ouidecay"})``.
    """

    def _factory(**overrides):
        cfg = ouidecay_lab.RunConfig(
            name="tiny",
            seeds=(1,),
            output_dir="runs",
            data=ouidecay_lab.DataCfg(kind="blobs", n=120, classes=3, noise=0.3, seed=0),
            model=ouidecay_lab.ModelCfg(layers=mlp_layers()),
            optimizer=ouidecay_lab.OptimCfg(mode="adamw", base_lr=0.01, min_lr=0.0001),
            training=ouidecay_lab.TrainCfg(epochs=2, batch_size=16, dtype="float64"),
            scheduler=ouidecay_lab.SchedulerConfig(lambda_base=1e-3, mode="fixed", t_tilde=4),
            output=ouidecay_lab.OutputCfg(wall_time=False),
        )
        for section, values in overrides.items():
            if isinstance(values, dict):
                cfg = replace(cfg, **{section: replace(getattr(cfg, section), **values)})
            else:
                cfg = replace(cfg, **{section: values})
        return cfg

    return _factory


@pytest.fixture
def write_config(tmp_path):
    """Write YAML text to tmp_path/<name>.yaml and return the path."""

    def _write(text: str, name: str = "run") -> Path:
        path = tmp_path / f"{name}.yaml"
        path.write_text(text, encoding="utf-8")
        return path

    return _write


MINIMAL_YAML = """\
name: minimal
seeds: [1]
data:
  kind: blobs
  n: 90
  classes: 3
  noise: 0.2
model:
  layers:
    - { kind: dense, out_features: 8 }
    - { kind: relu }
    - { kind: dense, out_features: 3 }
optimizer:
  mode: adamw
  base_lr: 0.01
  min_lr: 0.0001
training:
  epochs: 2
  batch_size: 16
  dtype: float64
scheduler:
  mode: ouidecay
  lambda_base: 0.001
  t_tilde: 2
output:
  wall_time: false
"""


@pytest.fixture
def minimal_yaml():
    return MINIMAL_YAML
