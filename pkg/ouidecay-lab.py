#!/usr/bin/env python3
"""
Desk-scale training lab for activation-driven, layer-wise weight decay.

Rich UI edition ✨

Key points:
- small NumPy network engine (dense, conv2d, maxpool2d, relu, flatten) with reverse-mode gradients
- batch-based OUI per monitored ReLU layer, computed from captured preactivations
- schedulers: fixed decay, OUIDecay (linear rescaling between s1*lambda and s2*lambda
  every t~ steps) and AdaDecay (sigmoid of layer-normalized gradient magnitudes)
- Adam (coupled L2) and AdamW (decoupled shrink) with warmup + cosine learning rate
- seeded experiment runner writing metrics / OUI / lambda traces as CSV, plus sweeps and summaries
- run configs are YAML files validated against schema/run_config.json
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import struct
import sys
import time
from collections.abc import Iterator, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, cast

try:
    import numpy as np
    from numpy.lib.stride_tricks import sliding_window_view
    from numpy.typing import NDArray
except ImportError as e:
    print("❌ numpy is not installed. Install it with:\n   pip install numpy")
    raise SystemExit(1) from e

try:
    import yaml
except ImportError as e:
    print("❌ PyYAML is not installed. Install it with:\n   pip install pyyaml")
    raise SystemExit(1) from e

try:
    from rich import box
    from rich.console import Console
    from rich.panel import Panel
    from rich.table import Table
    from rich.theme import Theme
    from rich.traceback import install as install_rich_traceback

    install_rich_traceback(show_locals=False)
except ImportError as e:
    print("❌ rich is not installed. Install it with:\n   pip install rich")
    raise SystemExit(1) from e

try:
    from jsonschema import Draft7Validator
except ImportError as e:
    print("❌ jsonschema is not installed. Install it with:\n   pip install jsonschema")
    raise SystemExit(1) from e

try:
    from dotenv import load_dotenv

    load_dotenv()  # loads .env from cwd automatically
except ImportError:
    pass  # python-dotenv is optional


THEME = Theme(
    {
        "title": "bold cyan",
        "accent": "cyan",
        "info": "bright_cyan",
        "ok": "bold green",
        "warn": "bold yellow",
        "err": "bold red",
        "dim": "dim",
        "path": "bright_white",
        "k": "dim",
        "v": "bright_white",
    }
)
console = Console(theme=THEME, highlight=False)

Array = NDArray[Any]

OUTPUT_ROOT_ENV = "OUI_LAB_OUTPUT_ROOT"


# ----------------------------
# Errors
# ----------------------------


class LabError(Exception):
    """Base class for every failure the lab reports; `exit_code` is the CLI status."""

    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 2


class InputError(LabError, ValueError):
    exit_code = 3


class DataLoadError(LabError):
    exit_code = 4


class IdxMagicError(DataLoadError):
    pass


class IdxTruncatedError(DataLoadError):
    pass


class IdxCountMismatchError(DataLoadError):
    pass


class MetricError(LabError, ValueError):
    exit_code = 5


class SchedulerError(LabError, ValueError):
    exit_code = 6


class NonFiniteLossError(LabError):
    exit_code = 7

    def __init__(self, message: str, diagnostic: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.diagnostic = diagnostic or {}


class SummaryError(LabError, ValueError):
    exit_code = 8


class InsufficientSamplesError(LabError):
    exit_code = 9


# ----------------------------
# Config + parsing
# ----------------------------

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "relu", "flatten")
PARAM_KINDS = ("dense", "conv2d")
SCHEDULER_MODES = ("fixed", "ouidecay", "adadecay")
OPTIMIZER_MODES = ("adam", "adamw")
DATA_KINDS = ("blobs", "spirals", "glyphs", "idx")
PROBE_SOURCES = ("train_batch", "fixed")
SWEEP_AXES = ("t_tilde", "scaling", "lambda_pair", "mode")

# Default sweep grids for the update interval and the scaling range.
DEFAULT_T_TILDE_GRID = (1, 4, 16, 64, 128, 256, 512, 1024)
DEFAULT_SCALING_GRID = ((0.67, 5.0), (0.67, 3.0), (0.33, 3.0), (0.33, 5.0))


def _expand_path(p: str) -> str:
    """Expand ~ and $VARS and return a normalized path string (doesn't require existence)."""
    p = (p or "").strip()
    if not p:
        return p
    p = os.path.expandvars(p)
    return str(Path(p).expanduser())


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense|conv2d|maxpool2d|relu|flatten
    in_features: int | None = None
    out_features: int | None = None
    in_channels: int | None = None
    out_channels: int | None = None
    kernel_size: int | None = None
    stride: int | None = None  # maxpool2d: defaults to kernel_size, conv2d: 1
    padding: int = 0
    monitored: bool = False

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ConfigError(f"layer kind must be one of: {', '.join(LAYER_KINDS)}")
        if self.monitored and self.kind != "relu":
            raise ConfigError(f"only relu layers may be monitored (got {self.kind})")
        for name in ("in_features", "out_features", "in_channels", "out_channels"):
            value = getattr(self, name)
            if value is not None and value <= 0:
                raise ConfigError(f"{self.kind}.{name} must be a positive integer")
        if self.kind == "dense" and self.out_features is None:
            raise ConfigError("dense.out_features is required")
        if self.kind in ("conv2d", "maxpool2d"):
            if self.kernel_size is None or self.kernel_size <= 0:
                raise ConfigError(f"{self.kind}.kernel_size must be a positive integer")
            if self.stride is not None and self.stride <= 0:
                raise ConfigError(f"{self.kind}.stride must be a positive integer")
            if self.padding < 0 or self.padding >= self.kernel_size:
                raise ConfigError(f"{self.kind}.padding must satisfy 0 <= padding < kernel_size")
        if self.kind == "conv2d" and self.out_channels is None:
            raise ConfigError("conv2d.out_channels is required")

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        if self.kind == "maxpool2d" and self.kernel_size is not None:
            return self.kernel_size
        return 1


@dataclass(frozen=True)
class DataCfg:
    kind: str = "blobs"  # blobs|spirals|glyphs|idx
    n: int = 600
    classes: int = 3
    noise: float = 0.5
    seed: int = 0
    val_fraction: float = 0.2
    features: int = 2
    image_size: int = 12
    images: str = ""
    labels: str = ""
    flip: bool = False


@dataclass(frozen=True)
class ModelCfg:
    layers: tuple[LayerSpec, ...] = ()


@dataclass(frozen=True)
class OptimCfg:
    mode: str = "adam"  # adam|adamw
    base_lr: float = 1e-3
    min_lr: float = 1e-5
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None


@dataclass(frozen=True)
class TrainCfg:
    epochs: int = 10
    batch_size: int = 64
    max_steps: int | None = None
    dtype: str = "float32"


@dataclass(frozen=True)
class SchedulerConfig:
    lambda_base: float = 1e-4
    mode: str = "fixed"  # fixed|ouidecay|adadecay
    t_tilde: int = 500
    s1: float = 0.67
    s2: float = 5.0
    epsilon: float = 1e-8
    adadecay_alpha: float = 1.0
    uniform_fallback: bool = False  # degenerate spread -> lambda_base instead of s1*lambda_base
    zero_based_steps: bool = False
    probe_source: str = "train_batch"  # train_batch|fixed
    probe_size: int = 128

    def __post_init__(self) -> None:
        if self.mode not in SCHEDULER_MODES:
            raise ConfigError(f"scheduler.mode must be one of: {', '.join(SCHEDULER_MODES)}")
        if not self.lambda_base >= 0:
            raise ConfigError("scheduler.lambda_base must be >= 0")
        if self.t_tilde < 1:
            raise ConfigError("scheduler.t_tilde must be >= 1")
        if not (self.s1 > 0 and self.s2 >= self.s1):
            raise ConfigError("scheduler scaling range must satisfy 0 < s1 <= s2")
        if not self.epsilon > 0:
            raise ConfigError("scheduler.epsilon must be > 0")
        if not self.adadecay_alpha > 0:
            raise ConfigError("scheduler.adadecay_alpha must be > 0")
        if self.probe_source not in PROBE_SOURCES:
            raise ConfigError(f"scheduler.probe_source must be one of: {', '.join(PROBE_SOURCES)}")
        if self.probe_size < 2:
            raise ConfigError("scheduler.probe_size must be >= 2")


@dataclass(frozen=True)
class OutputCfg:
    wall_time: bool = False
    lambda_every: int = 1


@dataclass(frozen=True)
class SweepCfg:
    t_tilde: tuple[int, ...] = DEFAULT_T_TILDE_GRID
    scaling: tuple[tuple[float, float], ...] = DEFAULT_SCALING_GRID
    modes: tuple[str, ...] = SCHEDULER_MODES


@dataclass(frozen=True)
class RunConfig:
    name: str
    seeds: tuple[int, ...]
    output_dir: str
    data: DataCfg
    model: ModelCfg
    optimizer: OptimCfg
    training: TrainCfg
    scheduler: SchedulerConfig
    output: OutputCfg = field(default_factory=OutputCfg)
    sweep: SweepCfg = field(default_factory=SweepCfg)


def _script_dir() -> Path:
    return Path(__file__).resolve().parent


def _run_schema_path() -> Path:
    return _script_dir() / "schema" / "run_config.json"


def load_run_schema() -> dict[str, Any]:
    schema_path = _run_schema_path()
    if not schema_path.exists():
        raise FileNotFoundError(f"Run config schema not found: {schema_path}")

    try:
        loaded = json.loads(schema_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Invalid JSON in run config schema at {schema_path}: {e}") from e

    if not isinstance(loaded, dict):
        raise ConfigError(f"Run config schema must be a JSON object at: {schema_path}")
    return cast(dict[str, Any], loaded)


def _error_path(path_parts: list[Any]) -> str:
    if not path_parts:
        return "root"
    return ".".join(str(p) for p in path_parts)


def validate_config_payload(payload: dict[str, Any], schema: dict[str, Any]) -> list[str]:
    validator = Draft7Validator(schema)
    errors = sorted(validator.iter_errors(payload), key=lambda e: list(e.absolute_path))
    msgs: list[str] = []
    for err in errors:
        path = _error_path(list(err.absolute_path))
        msgs.append(f"{path}: {err.message}")
    return msgs


def _parse_layer(node: dict[str, Any]) -> LayerSpec:
    kind = str(node["kind"]).strip().lower()
    return LayerSpec(
        kind=kind,
        in_features=node.get("in_features"),
        out_features=node.get("out_features"),
        in_channels=node.get("in_channels"),
        out_channels=node.get("out_channels"),
        kernel_size=node.get("kernel_size"),
        stride=node.get("stride"),
        padding=int(node.get("padding", 0)),
        # relu layers feed OUI unless switched off
        monitored=bool(node.get("monitored", kind == "relu")),
    )


def parse_config(raw: dict[str, Any], *, default_name: str = "run") -> RunConfig:
    """Build a RunConfig from an already schema-validated mapping."""
    data_node: dict[str, Any] = cast(dict[str, Any], raw.get("data") or {})
    data = DataCfg(
        kind=str(data_node.get("kind", "blobs")),
        n=int(data_node.get("n", 600)),
        classes=int(data_node.get("classes", 3)),
        noise=float(data_node.get("noise", 0.5)),
        seed=int(data_node.get("seed", 0)),
        val_fraction=float(data_node.get("val_fraction", 0.2)),
        features=int(data_node.get("features", 2)),
        image_size=int(data_node.get("image_size", 12)),
        images=_expand_path(str(data_node.get("images", ""))),
        labels=_expand_path(str(data_node.get("labels", ""))),
        flip=bool(data_node.get("flip", False)),
    )
    if data.kind == "idx" and (not data.images or not data.labels):
        raise ConfigError("data.images and data.labels are required when data.kind is idx")

    model_node: dict[str, Any] = cast(dict[str, Any], raw.get("model") or {})
    layers = tuple(_parse_layer(cast(dict[str, Any], n)) for n in model_node.get("layers", []))
    if not layers:
        raise ConfigError("model.layers must list at least one layer")

    opt_node: dict[str, Any] = cast(dict[str, Any], raw.get("optimizer") or {})
    clip = opt_node.get("clip_norm")
    optimizer = OptimCfg(
        mode=str(opt_node.get("mode", "adam")),
        base_lr=float(opt_node.get("base_lr", 1e-3)),
        min_lr=float(opt_node.get("min_lr", 1e-5)),
        warmup_steps=int(opt_node.get("warmup_steps", 0)),
        beta1=float(opt_node.get("beta1", 0.9)),
        beta2=float(opt_node.get("beta2", 0.999)),
        eps=float(opt_node.get("eps", 1e-8)),
        clip_norm=float(clip) if clip is not None else None,
    )
    if optimizer.min_lr > optimizer.base_lr:
        raise ConfigError("optimizer.min_lr must not exceed optimizer.base_lr")

    train_node: dict[str, Any] = cast(dict[str, Any], raw.get("training") or {})
    max_steps = train_node.get("max_steps")
    training = TrainCfg(
        epochs=int(train_node.get("epochs", 10)),
        batch_size=int(train_node.get("batch_size", 64)),
        max_steps=int(max_steps) if max_steps is not None else None,
        dtype=str(train_node.get("dtype", "float32")),
    )

    sched_node: dict[str, Any] = cast(dict[str, Any], raw.get("scheduler") or {})
    scheduler = SchedulerConfig(
        lambda_base=float(sched_node.get("lambda_base", 1e-4)),
        mode=str(sched_node.get("mode", "fixed")),
        t_tilde=int(sched_node.get("t_tilde", 500)),
        s1=float(sched_node.get("s1", 0.67)),
        s2=float(sched_node.get("s2", 5.0)),
        epsilon=float(sched_node.get("epsilon", 1e-8)),
        adadecay_alpha=float(sched_node.get("adadecay_alpha", 1.0)),
        uniform_fallback=bool(sched_node.get("uniform_fallback", False)),
        zero_based_steps=bool(sched_node.get("zero_based_steps", False)),
        probe_source=str(sched_node.get("probe_source", "train_batch")),
        probe_size=int(sched_node.get("probe_size", 128)),
    )

    out_node: dict[str, Any] = cast(dict[str, Any], raw.get("output") or {})
    output = OutputCfg(
        wall_time=bool(out_node.get("wall_time", False)),
        lambda_every=int(out_node.get("lambda_every", 1)),
    )

    sweep_node: dict[str, Any] = cast(dict[str, Any], raw.get("sweep") or {})
    sweep_cfg = SweepCfg(
        t_tilde=tuple(int(t) for t in sweep_node.get("t_tilde", DEFAULT_T_TILDE_GRID)),
        scaling=tuple(
            (float(pair[0]), float(pair[1]))
            for pair in sweep_node.get("scaling", DEFAULT_SCALING_GRID)
        ),
        modes=tuple(str(m) for m in sweep_node.get("modes", SCHEDULER_MODES)),
    )

    seeds = tuple(int(s) for s in raw.get("seeds", (1, 2, 3)))
    if not seeds:
        raise ConfigError("seeds must list at least one seed")

    return RunConfig(
        name=str(raw.get("name", default_name)).strip() or default_name,
        seeds=seeds,
        output_dir=_expand_path(str(raw.get("output_dir", "runs"))),
        data=data,
        model=ModelCfg(layers=layers),
        optimizer=optimizer,
        training=training,
        scheduler=scheduler,
        output=output,
        sweep=sweep_cfg,
    )


def load_config(path: Path) -> RunConfig:
    if not path.exists():
        raise FileNotFoundError(f"Config not found: {path}")

    loaded = yaml.safe_load(path.read_text(encoding="utf-8"))
    if loaded is None:
        raw: dict[str, Any] = {}
    elif not isinstance(loaded, dict):
        raise ConfigError(f"{path.name} root must be a mapping")
    else:
        raw = cast(dict[str, Any], loaded)

    errors = validate_config_payload(raw, load_run_schema())
    if errors:
        raise ConfigError("config failed schema validation:\n  - " + "\n  - ".join(errors))

    return parse_config(raw, default_name=path.stem)


def resolve_output_root(cfg: RunConfig, cli_out: str | None = None) -> Path:
    """--out beats $OUI_LAB_OUTPUT_ROOT, which beats the config's output_dir."""
    if cli_out:
        return Path(_expand_path(cli_out))
    env_root = os.environ.get(OUTPUT_ROOT_ENV, "").strip()
    if env_root:
        return Path(_expand_path(env_root))
    return Path(cfg.output_dir)


# ----------------------------
# Network engine
# ----------------------------


def _kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Array:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _windows(x: Array, kernel: int, stride: int) -> Array:
    """(B, C, H, W) -> strided view (B, C, OH, OW, k, k)."""
    return sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]


def _acc(x: Array) -> Array:
    return x.astype(np.float64, copy=False)


def _pad_hw(x: Array, pad: int, value: float = 0.0) -> Array:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


class Layer:
    """One stage of a Network; parameters live in the Network's store, not on the layer."""

    kind = ""

    def __init__(self, layer_id: str, spec: LayerSpec) -> None:
        self.layer_id = layer_id
        self.spec = spec
        self.in_shape: tuple[int, ...] = ()
        self.out_shape: tuple[int, ...] = ()

    def bind(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        self.in_shape = in_shape
        self.out_shape = self._infer(in_shape)
        return self.out_shape

    def _infer(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def _mismatch(self, detail: str) -> ConfigError:
        return ConfigError(f"layer {self.layer_id} ({self.kind}): {detail}")

    def init_params(self, rng: np.random.Generator, dtype: np.dtype[Any]) -> dict[str, Array]:
        return {}

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        raise NotImplementedError

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        raise NotImplementedError


class Dense(Layer):
    kind = "dense"

    def _infer(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 1:
            raise self._mismatch(f"expects flat features, got input shape {in_shape}")
        expected = self.spec.in_features
        if expected is not None and expected != in_shape[0]:
            raise self._mismatch(f"in_features={expected} but receives {in_shape[0]}")
        return (cast(int, self.spec.out_features),)

    def init_params(self, rng: np.random.Generator, dtype: np.dtype[Any]) -> dict[str, Array]:
        fan_in = self.in_shape[0]
        out = self.out_shape[0]
        return {
            "weight": _kaiming_uniform(rng, (fan_in, out), fan_in).astype(dtype),
            "bias": np.zeros(out, dtype=dtype),
        }

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        y = _acc(x) @ _acc(params["weight"]) + params["bias"]
        return y.astype(x.dtype, copy=False), x

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        x, d = cache, _acc(dy)
        dx = d @ _acc(params["weight"]).T
        grads = {"weight": _acc(x).T @ d, "bias": d.sum(axis=0)}
        return dx.astype(dy.dtype, copy=False), {
            k: g.astype(dy.dtype, copy=False) for k, g in grads.items()
        }


class Conv2d(Layer):
    kind = "conv2d"

    def _infer(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 3:
            raise self._mismatch(f"expects (C, H, W) input, got {in_shape}")
        channels, height, width = in_shape
        expected = self.spec.in_channels
        if expected is not None and expected != channels:
            raise self._mismatch(f"in_channels={expected} but receives {channels}")
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        out_h = (height + 2 * p - k) // s + 1
        out_w = (width + 2 * p - k) // s + 1
        if out_h < 1 or out_w < 1:
            raise self._mismatch(f"kernel {k} does not fit input {height}x{width}")
        return (cast(int, self.spec.out_channels), out_h, out_w)

    def init_params(self, rng: np.random.Generator, dtype: np.dtype[Any]) -> dict[str, Array]:
        channels = self.in_shape[0]
        k = cast(int, self.spec.kernel_size)
        out = self.out_shape[0]
        fan_in = channels * k * k
        return {
            "weight": _kaiming_uniform(rng, (out, channels, k, k), fan_in).astype(dtype),
            "bias": np.zeros(out, dtype=dtype),
        }

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        win = _windows(_pad_hw(x, p), k, s)
        y = np.tensordot(_acc(win), _acc(params["weight"]), axes=([1, 4, 5], [1, 2, 3]))
        y = y.transpose(0, 3, 1, 2) + params["bias"][None, :, None, None]
        return np.ascontiguousarray(y, dtype=x.dtype), (x.shape, win)

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        x_shape, win = cache
        weight, d = _acc(params["weight"]), _acc(dy)
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        batch, channels, height, width = x_shape
        out_h, out_w = dy.shape[2], dy.shape[3]

        d_weight = np.tensordot(d, _acc(win), axes=([0, 2, 3], [0, 2, 3])).astype(dy.dtype)
        d_bias = d.sum(axis=(0, 2, 3)).astype(dy.dtype)

        dxp = np.zeros((batch, channels, height + 2 * p, width + 2 * p))
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(d, weight[:, :, i, j], axes=([1], [0]))
                dxp[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += (
                    contrib.transpose(0, 3, 1, 2)
                )
        dx = dxp[:, :, p : p + height, p : p + width]
        return np.ascontiguousarray(dx, dtype=dy.dtype), {"weight": d_weight, "bias": d_bias}


class MaxPool2d(Layer):
    kind = "maxpool2d"

    def _infer(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        if len(in_shape) != 3:
            raise self._mismatch(f"expects (C, H, W) input, got {in_shape}")
        channels, height, width = in_shape
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        out_h = (height + 2 * p - k) // s + 1
        out_w = (width + 2 * p - k) // s + 1
        if out_h < 1 or out_w < 1:
            raise self._mismatch(f"pool {k} does not fit input {height}x{width}")
        return (channels, out_h, out_w)

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        win = _windows(_pad_hw(x, p, value=-np.inf), k, s)
        flat = win.reshape(*win.shape[:4], k * k)
        idx = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        x_shape, idx = cache
        k, s, p = cast(int, self.spec.kernel_size), self.spec.effective_stride, self.spec.padding
        batch, channels, height, width = x_shape
        out_h, out_w = dy.shape[2], dy.shape[3]
        dxp = np.zeros((batch, channels, height + 2 * p, width + 2 * p), dtype=dy.dtype)
        for q in range(k * k):
            i, j = divmod(q, k)
            dxp[:, :, i : i + s * (out_h - 1) + 1 : s, j : j + s * (out_w - 1) + 1 : s] += np.where(
                idx == q, dy, 0
            )
        return np.ascontiguousarray(dxp[:, :, p : p + height, p : p + width]), {}


class ReLU(Layer):
    kind = "relu"

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        return np.maximum(x, 0), x > 0

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        return dy * cache, {}


class Flatten(Layer):
    kind = "flatten"

    def _infer(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return (int(np.prod(in_shape)),)

    def forward(self, x: Array, params: dict[str, Array]) -> tuple[Array, Any]:
        return x.reshape(x.shape[0], -1), x.shape

    def backward(
        self, dy: Array, cache: Any, params: dict[str, Array]
    ) -> tuple[Array, dict[str, Array]]:
        return dy.reshape(cache), {}


_LAYER_TYPES: dict[str, type[Layer]] = {
    "dense": Dense,
    "conv2d": Conv2d,
    "maxpool2d": MaxPool2d,
    "relu": ReLU,
    "flatten": Flatten,
}


@dataclass
class Network:
    layers: list[Layer]
    params: dict[str, dict[str, Array]]
    input_shape: tuple[int, ...]
    num_classes: int
    dtype: np.dtype[Any]
    # monitored relu id -> id of the dense/conv layer producing its preactivation
    monitored: dict[str, str] = field(default_factory=dict)

    @property
    def oui_layers(self) -> list[str]:
        return list(self.monitored.values())

    @property
    def decayed_layers(self) -> list[str]:
        return [layer.layer_id for layer in self.layers if layer.kind in PARAM_KINDS]


@dataclass
class ForwardTrace:
    logits: Array
    preacts: dict[str, Array]
    caches: list[Any]

    @property
    def batch_size(self) -> int:
        return int(self.logits.shape[0])


def build_network(
    layers: Sequence[LayerSpec],
    input_shape: tuple[int, ...],
    num_classes: int,
    seed: int,
    dtype: Any = np.float32,
) -> Network:
    """Instantiate layers, check shape compatibility end to end and initialize parameters."""
    if not layers:
        raise ConfigError("network needs at least one layer")
    np_dtype = np.dtype(dtype)
    rng = np.random.default_rng(seed)

    built: list[Layer] = []
    shape = tuple(int(d) for d in input_shape)
    for idx, spec in enumerate(layers):
        layer = _LAYER_TYPES[spec.kind](f"{spec.kind}{idx}", spec)
        shape = layer.bind(shape)
        built.append(layer)

    if shape != (num_classes,):
        raise ConfigError(
            f"layer {built[-1].layer_id} ({built[-1].kind}): network output shape {shape} "
            f"does not match {num_classes} classes"
        )

    monitored: dict[str, str] = {}
    for idx, layer in enumerate(built):
        if layer.kind != "relu" or not layer.spec.monitored:
            continue
        prev = built[idx - 1] if idx > 0 else None
        if prev is None or prev.kind not in PARAM_KINDS:
            raise ConfigError(
                f"layer {layer.layer_id} (relu): "
                "monitored relu must directly follow dense or conv2d"
            )
        monitored[layer.layer_id] = prev.layer_id

    params = {layer.layer_id: layer.init_params(rng, np_dtype) for layer in built}
    return Network(
        layers=built,
        params={k: v for k, v in params.items() if v},
        input_shape=tuple(int(d) for d in input_shape),
        num_classes=num_classes,
        dtype=np_dtype,
        monitored=monitored,
    )


def forward(net: Network, batch: Array, capture: bool = False) -> ForwardTrace:
    if batch.ndim == 0 or batch.shape[0] < 1:
        raise InputError("batch must contain at least one sample")
    if tuple(batch.shape[1:]) != net.input_shape:
        first = net.layers[0]
        raise ConfigError(
            f"layer {first.layer_id} ({first.kind}): batch sample shape {tuple(batch.shape[1:])} "
            f"does not match network input {net.input_shape}"
        )

    x = np.asarray(batch, dtype=net.dtype)
    preacts: dict[str, Array] = {}
    caches: list[Any] = []
    for layer in net.layers:
        if capture and layer.layer_id in net.monitored:
            preacts[net.monitored[layer.layer_id]] = x.reshape(x.shape[0], -1)
        x, cache = layer.forward(x, net.params.get(layer.layer_id, {}))
        caches.append(cache)
    return ForwardTrace(logits=x, preacts=preacts, caches=caches)


def _check_labels(labels: Array, rows: int, num_classes: int) -> Array:
    labels = np.asarray(labels)
    if labels.ndim != 1 or labels.shape[0] != rows:
        raise InputError(f"expected {rows} labels, got shape {labels.shape}")
    if rows == 0:
        raise InputError("empty batch")
    if not np.issubdtype(labels.dtype, np.integer):
        raise InputError("labels must be integer class indices")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"label out of range [0, {num_classes})")
    return labels.astype(np.int64, copy=False)


def _log_softmax(logits: Array) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def loss(logits: Array, labels: Array) -> float:
    """Mean softmax cross-entropy, accumulated in float64."""
    if logits.ndim != 2 or logits.shape[0] == 0:
        raise InputError("empty batch")
    labels = _check_labels(labels, logits.shape[0], logits.shape[1])
    log_p = _log_softmax(logits)
    return float(-log_p[np.arange(labels.shape[0]), labels].mean())


def backward(net: Network, trace: ForwardTrace, labels: Array) -> dict[str, dict[str, Array]]:
    """Gradients of the mean cross-entropy w.r.t. every parameter."""
    batch = trace.batch_size
    labels = _check_labels(labels, batch, net.num_classes)
    probs = np.exp(_log_softmax(trace.logits))
    probs[np.arange(batch), labels] -= 1.0
    dy = (probs / batch).astype(net.dtype)

    grads: dict[str, dict[str, Array]] = {}
    for layer, cache in zip(reversed(net.layers), reversed(trace.caches), strict=True):
        dy, layer_grads = layer.backward(dy, cache, net.params.get(layer.layer_id, {}))
        if layer_grads:
            grads[layer.layer_id] = layer_grads
    return grads


def predict(net: Network, batch: Array) -> Array:
    return forward(net, batch).logits.argmax(axis=1)


def evaluate(
    net: Network, samples: Array, labels: Array, batch_size: int = 512
) -> tuple[float, float]:
    """(mean loss, accuracy) over a sample set, without capture or updates."""
    total = samples.shape[0]
    if total == 0:
        raise InputError("cannot evaluate an empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, total, batch_size):
        x = samples[start : start + batch_size]
        y = labels[start : start + batch_size]
        logits = forward(net, x).logits
        loss_sum += loss(logits, y) * x.shape[0]
        correct += int((logits.argmax(axis=1) == y).sum())
    return loss_sum / total, correct / total


def clip_grad_norm(grads: dict[str, dict[str, Array]], max_norm: float) -> float:
    """Scale all gradients in place so their global L2 norm is at most max_norm."""
    total = math.sqrt(
        sum(
            float(np.sum(np.square(g, dtype=np.float64)))
            for layer_grads in grads.values()
            for g in layer_grads.values()
        )
    )
    if total > max_norm > 0:
        scale = max_norm / total
        for layer_grads in grads.values():
            for g in layer_grads.values():
                g *= scale
    return total


# ----------------------------
# OUI metric
# ----------------------------


@dataclass(frozen=True)
class ActivationMask:
    layer_id: str
    bits: NDArray[np.bool_]  # (B, d); True where the unit fired

    @property
    def batch_size(self) -> int:
        return int(self.bits.shape[0])

    @property
    def units(self) -> int:
        return int(self.bits.shape[1])


@dataclass(frozen=True)
class OuiReport:
    step: int
    values: dict[str, float]
    oui_min: float
    oui_max: float

    @classmethod
    def from_values(cls, step: int, values: Mapping[str, float]) -> OuiReport:
        vals = {k: float(v) for k, v in values.items()}
        if not vals:
            return cls(step=step, values={}, oui_min=math.nan, oui_max=math.nan)
        return cls(step=step, values=vals, oui_min=min(vals.values()), oui_max=max(vals.values()))

    @property
    def spread(self) -> float:
        return self.oui_max - self.oui_min


def activation_mask(preacts: Array, layer_id: str = "layer") -> ActivationMask:
    """Binary firing pattern: strictly positive preactivations are active, exact zeros are not."""
    preacts = np.asarray(preacts)
    if preacts.ndim != 2 or preacts.shape[0] < 1 or preacts.shape[1] < 1:
        raise MetricError(f"layer {layer_id!r}: preactivations must be a non-empty B x d matrix")
    bad = ~np.isfinite(preacts)
    if bad.any():
        sample, unit = (int(v) for v in np.argwhere(bad)[0])
        raise MetricError(
            f"layer {layer_id!r}: non-finite preactivation at unit {unit} (sample {sample})"
        )
    return ActivationMask(layer_id=layer_id, bits=preacts > 0)


def layer_oui(mask: ActivationMask) -> float:
    """Mean over units of min(s_j, B - s_j) / floor(B/2), with s_j the unit's firing count."""
    batch = mask.batch_size
    half = batch // 2
    if half < 1:
        raise MetricError(
            f"layer {mask.layer_id!r}: probe batch too small (B={batch}, need at least 2)"
        )
    counts = mask.bits.sum(axis=0, dtype=np.int64)
    minority = np.minimum(counts, batch - counts)
    return float(minority.sum()) / (half * mask.units)


def probe(net: Network, batch: Array, step: int, trace: ForwardTrace | None = None) -> OuiReport:
    """OUI of every monitored layer on one batch; never touches the parameters.

    A capture-enabled trace of the same batch under the current parameters may be passed in
    to skip the extra forward pass.
    """
    if not net.monitored:
        raise ConfigError("network has no monitored relu layer to probe")
    if trace is None or not trace.preacts:
        trace = forward(net, batch, capture=True)
    values = {
        layer_id: layer_oui(activation_mask(trace.preacts[layer_id], layer_id))
        for layer_id in net.oui_layers
    }
    return OuiReport.from_values(step, values)


# ----------------------------
# Decay schedulers
# ----------------------------


@dataclass(frozen=True)
class DecayAssignment:
    step: int
    values: dict[str, float]
    # report that produced this assignment (OUIDecay ticks only)
    source: OuiReport | None = field(default=None, compare=False)

    @classmethod
    def uniform(cls, step: int, layer_ids: Sequence[str], value: float) -> DecayAssignment:
        return cls(step=step, values={layer_id: float(value) for layer_id in layer_ids})


def _held_lambda(cfg: SchedulerConfig) -> float:
    """lambda_base kept inside [s1, s2] * lambda_base."""
    return min(max(cfg.lambda_base, cfg.s1 * cfg.lambda_base), cfg.s2 * cfg.lambda_base)


def assign_decay(report: OuiReport, cfg: SchedulerConfig) -> DecayAssignment:
    """Linear rescaling of each layer's relative OUI position onto [s1, s2] * lambda_base."""
    if not report.values:
        raise SchedulerError("cannot assign decay from an empty OUI report")

    base = cfg.lambda_base
    if cfg.uniform_fallback and report.spread == 0:
        uniform = DecayAssignment.uniform(report.step, list(report.values), _held_lambda(cfg))
        return replace(uniform, source=report)

    denom = report.spread + cfg.epsilon
    values: dict[str, float] = {}
    for layer_id, oui in report.values.items():
        factor = cfg.s1 + (cfg.s2 - cfg.s1) * ((oui - report.oui_min) / denom)
        # rounding in s1 + (s2 - s1) may overshoot s2 by an ulp
        values[layer_id] = base * min(factor, cfg.s2)
    return DecayAssignment(step=report.step, values=values, source=report)


def is_tick(step: int, cfg: SchedulerConfig) -> bool:
    return step % cfg.t_tilde == 0


def scheduler_tick(
    step: int,
    net: Network,
    probe_batch: Array,
    cfg: SchedulerConfig,
    current: DecayAssignment,
    trace: ForwardTrace | None = None,
) -> DecayAssignment:
    """Refresh lambdas on ticks; off-tick calls hand back `current` untouched."""
    first_step = 0 if cfg.zero_based_steps else 1
    if step < first_step:
        raise SchedulerError(f"step must be >= {first_step}, got {step}")

    if cfg.mode != "ouidecay":
        return DecayAssignment.uniform(step, net.decayed_layers, cfg.lambda_base)
    if not is_tick(step, cfg):
        return current

    fresh = assign_decay(probe(net, probe_batch, step, trace=trace), cfg)
    # decayed layers without a monitored relu hold the clamped lambda_base
    held = _held_lambda(cfg)
    values = {layer_id: fresh.values.get(layer_id, held) for layer_id in net.decayed_layers}
    return DecayAssignment(step=step, values=values, source=fresh.source)


def _sigmoid(x: Array) -> Array:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def adadecay_factors(
    grads: Mapping[str, Array], alpha: float, eps_num: float = 1e-12
) -> dict[str, Array]:
    """Per-parameter decay multipliers 2*sigmoid(alpha*z), z the layer z-score of |g|."""
    if not alpha > 0:
        raise ConfigError("adadecay alpha must be > 0")
    factors: dict[str, Array] = {}
    for layer_id, grad in grads.items():
        mag = np.abs(np.asarray(grad, dtype=np.float64))
        if mag.size == 0:
            raise ConfigError(f"layer {layer_id!r} has no decayed parameters")
        if np.ptp(mag) == 0:
            z = np.zeros_like(mag)
        else:
            z = (mag - mag.mean()) / (mag.std() + eps_num)
        factors[layer_id] = 2.0 * _sigmoid(alpha * z)
    return factors


# ----------------------------
# Optimizers + learning rate
# ----------------------------


@dataclass
class OptimizerState:
    mode: str = "adam"  # adam (coupled L2) | adamw (decoupled)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, dict[str, Array]] = field(default_factory=dict)
    v: dict[str, dict[str, Array]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.mode not in OPTIMIZER_MODES:
            raise ConfigError(f"optimizer.mode must be one of: {', '.join(OPTIMIZER_MODES)}")


def apply_step(
    state: OptimizerState,
    params: dict[str, dict[str, Array]],
    grads: Mapping[str, Mapping[str, Array]],
    lr: float,
    decay: DecayAssignment | Mapping[str, float],
    multipliers: Mapping[str, Array] | None = None,
) -> dict[str, dict[str, Array]]:
    """One Adam/AdamW update in place. Only `weight` tensors are decayed, never biases."""
    if not lr >= 0:
        raise ConfigError(f"learning rate must be >= 0, got {lr}")
    lambdas = decay.values if isinstance(decay, DecayAssignment) else decay

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for layer_id, layer_params in params.items():
        layer_grads = grads.get(layer_id)
        if layer_grads is None:
            raise ConfigError(f"no gradients for layer {layer_id!r}")
        for name, p in layer_params.items():
            g = layer_grads[name]
            if g.shape != p.shape:
                raise ConfigError(
                    f"gradient shape {g.shape} does not match parameter {layer_id}.{name} {p.shape}"
                )
            lam: float | Array = 0.0
            if name == "weight":
                if layer_id not in lambdas:
                    raise ConfigError(f"missing weight decay for layer {layer_id!r}")
                lam = lambdas[layer_id]
                if multipliers is not None and layer_id in multipliers:
                    lam = lam * multipliers[layer_id]

            if state.mode == "adam":
                g = g + lam * p
            else:
                p *= 1.0 - lr * lam

            m = state.m.setdefault(layer_id, {}).setdefault(name, np.zeros_like(p))
            v = state.v.setdefault(layer_id, {}).setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float
    min_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 <= self.min_lr <= self.base_lr:
            raise ConfigError("learning rate schedule needs 0 <= min_lr <= base_lr")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError(
                f"learning rate schedule needs 0 <= warmup_steps ({self.warmup_steps}) "
                f"< total_steps ({self.total_steps})"
            )


def lr_at(sched: LrSchedule, step: int) -> float:
    """Linear ramp from 0 to base_lr over the warmup, then cosine down to min_lr."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    if step > sched.total_steps:
        console.print(
            f"[warn]⚠ lr_at step {step} is past total_steps={sched.total_steps}; using min_lr.[/]"
        )
        return sched.min_lr
    if sched.warmup_steps > 0 and step <= sched.warmup_steps:
        return sched.base_lr * step / sched.warmup_steps
    progress = (step - sched.warmup_steps) / (sched.total_steps - sched.warmup_steps)
    span = sched.base_lr - sched.min_lr
    return sched.min_lr + 0.5 * span * (1.0 + math.cos(math.pi * progress))


# ----------------------------
# Data
# ----------------------------

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


@dataclass(frozen=True)
class Dataset:
    samples: Array  # (N, *feature_shape) float32
    labels: Array  # (N,) int64
    num_classes: int
    mean: Array | None = None  # per channel, set once normalized
    std: Array | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.samples.shape[0] != self.labels.shape[0]:
            raise InputError(
                f"{self.samples.shape[0]} samples but {self.labels.shape[0]} labels"
            )
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise InputError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.samples.shape[0])

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(int(d) for d in self.samples.shape[1:])


def _balanced_labels(rng: np.random.Generator, n: int, c: int) -> Array:
    return rng.permutation(np.arange(n, dtype=np.int64) % c)


def gen_synthetic(
    kind: str,
    n: int,
    c: int,
    noise: float,
    seed: int,
    *,
    features: int = 2,
    image_size: int = 12,
) -> Dataset:
    """Deterministic toy classification sets; class sizes differ by at most one sample.

    blobs   - Gaussian clouds around uniform random centroids in `features` dims
    spirals - `c` interleaved 2-D spiral arms
    glyphs  - 1 x S x S images, one fixed random binary template per class plus noise
    """
    if c < 2 or n < c:
        raise InputError(f"need n >= c >= 2 (got n={n}, c={c})")
    if not noise >= 0:
        raise InputError("noise must be >= 0")
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(rng, n, c)

    if kind == "blobs":
        if features < 1:
            raise InputError("blobs need at least one feature")
        centroids = rng.uniform(-5.0, 5.0, size=(c, features))
        samples = centroids[labels] + noise * rng.standard_normal((n, features))
    elif kind == "spirals":
        t = rng.uniform(0.05, 1.0, size=n)
        angle = labels * (2.0 * math.pi / c) + t * 3.0 * math.pi
        samples = np.stack([t * np.cos(angle), t * np.sin(angle)], axis=1)
        samples = samples + noise * rng.standard_normal((n, 2))
    elif kind == "glyphs":
        if image_size < 2:
            raise InputError("glyph images need image_size >= 2")
        templates = (rng.random((c, image_size, image_size)) < 0.25).astype(np.float64)
        samples = templates[labels] + noise * rng.standard_normal((n, image_size, image_size))
        samples = np.clip(samples, 0.0, 1.0)[:, None, :, :]
    else:
        raise InputError(f"unknown synthetic dataset kind: {kind}")

    return Dataset(
        samples=samples.astype(np.float32), labels=labels, num_classes=c, name=f"{kind}-{seed}"
    )


def _read_idx(path: Path, expected_magic: int) -> Array:
    try:
        data = path.read_bytes()
    except FileNotFoundError as e:
        raise DataLoadError(f"IDX file not found: {path}") from e
    if len(data) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise IdxMagicError(
            f"{path}: bad magic number 0x{magic:08X}, expected 0x{expected_magic:08X}"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxTruncatedError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise IdxTruncatedError(
            f"{path}: expected {count} bytes of data, found {len(data) - header}"
        )
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(path: Path, array: Array) -> None:
    """Write an unsigned-byte IDX file (magic 0x0000080N for N dims)."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x00000800 | arr.ndim) + struct.pack(f">{arr.ndim}I", *arr.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + arr.tobytes())


def load_idx(images_path: Path | str, labels_path: Path | str) -> Dataset:
    """IDX image/label pair -> Dataset with pixels scaled to [0, 1], shape (N, 1, rows, cols)."""
    images = _read_idx(Path(images_path), IDX_IMAGES_MAGIC)
    labels = _read_idx(Path(labels_path), IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images in {images_path} "
            f"but {labels.shape[0]} labels in {labels_path}"
        )
    samples = (images.astype(np.float32) / 255.0)[:, None, :, :]
    label_arr = labels.astype(np.int64)
    num_classes = max(2, int(label_arr.max()) + 1) if label_arr.size else 2
    return Dataset(
        samples=samples, labels=label_arr, num_classes=num_classes, name=Path(images_path).stem
    )


def load_dataset(cfg: DataCfg) -> Dataset:
    if cfg.kind == "idx":
        return load_idx(cfg.images, cfg.labels)
    return gen_synthetic(
        cfg.kind,
        cfg.n,
        cfg.classes,
        cfg.noise,
        cfg.seed,
        features=cfg.features,
        image_size=cfg.image_size,
    )


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[Array, Array]:
    if not 0 < val_fraction < 1:
        raise InputError("val_fraction must lie strictly between 0 and 1")
    n_val = int(round(n * val_fraction))
    if not 1 <= n_val < n:
        raise InputError(f"val_fraction={val_fraction} leaves an empty split for n={n}")
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _channel_axes(samples: Array) -> tuple[int, ...]:
    # per-channel for images (N, C, H, W), per-feature for flat (N, D)
    return (0, 2, 3) if samples.ndim == 4 else (0,)


def _channel_view(stat: Array, samples: Array) -> Array:
    return stat[None, :, None, None] if samples.ndim == 4 else stat[None, :]


def split_dataset(ds: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded disjoint train/val split, both normalized with the train statistics."""
    train_idx, val_idx = split_indices(len(ds), val_fraction, seed)
    train_raw = ds.samples[train_idx].astype(np.float64)
    axes = _channel_axes(train_raw)
    mean = train_raw.mean(axis=axes)
    std = train_raw.std(axis=axes)
    std = np.where(std > 0, std, 1.0)

    def _norm(x: Array) -> Array:
        x64 = x.astype(np.float64)
        return ((x64 - _channel_view(mean, x64)) / _channel_view(std, x64)).astype(np.float32)

    common = {"num_classes": ds.num_classes, "mean": mean, "std": std}
    train = Dataset(
        samples=_norm(ds.samples[train_idx]),
        labels=ds.labels[train_idx],
        name=f"{ds.name}/train",
        **common,
    )
    val = Dataset(
        samples=_norm(ds.samples[val_idx]),
        labels=ds.labels[val_idx],
        name=f"{ds.name}/val",
        **common,
    )
    return train, val


def batches(
    ds: Dataset, batch_size: int, shuffle_seed: int, epoch: int, flip: bool = False
) -> Iterator[tuple[Array, Array]]:
    """Shuffled mini-batches, fixed per (seed, epoch); the last partial batch is kept."""
    if batch_size < 1:
        raise InputError("batch_size must be >= 1")
    rng = np.random.default_rng([shuffle_seed, epoch])
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        x = ds.samples[idx]
        if flip and x.ndim == 4:
            mirror = rng.random(idx.shape[0]) < 0.5
            x[mirror] = x[mirror][..., ::-1]
        yield x, ds.labels[idx]


def export_csv(ds: Dataset, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    flat = ds.samples.reshape(len(ds), -1)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for label, row in zip(ds.labels, flat, strict=True):
            writer.writerow([int(label)] + [float(v) for v in row])


# ----------------------------
# Experiment runner
# ----------------------------


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    epoch_time_s: float


@dataclass
class RunRecord:
    config_name: str
    label: str
    mode: str
    lambda_base: float
    seed: int
    epochs: list[EpochMetrics] = field(default_factory=list)
    oui_trace: list[tuple[int, str, float]] = field(default_factory=list)
    lambda_trace: list[tuple[int, str, float]] = field(default_factory=list)
    tick_ms: list[tuple[int, float]] = field(default_factory=list)  # (step, ms), ticks only
    iter_ms: list[float] = field(default_factory=list)
    steps: int = 0
    total_time_s: float = 0.0

    @property
    def best_val_loss(self) -> float:
        if not self.epochs:
            return math.nan
        return min(e.val_loss for e in self.epochs)


METRICS_HEADER = ["epoch", "train_loss", "train_acc", "val_loss", "val_acc", "epoch_time_s"]


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def write_run_outputs(record: RunRecord, out_dir: Path) -> None:
    _write_csv(
        out_dir / "metrics.csv",
        METRICS_HEADER,
        [
            [e.epoch, e.train_loss, e.train_acc, e.val_loss, e.val_acc, e.epoch_time_s]
            for e in record.epochs
        ],
    )
    _write_csv(out_dir / "oui_trace.csv", ["step", "layer_id", "oui"], record.oui_trace)
    _write_csv(out_dir / "lambda_trace.csv", ["step", "layer_id", "lambda"], record.lambda_trace)
    run_info = {
        "config": record.config_name,
        "label": record.label,
        "mode": record.mode,
        "lambda_base": record.lambda_base,
        "seed": record.seed,
        "best_val_loss": record.best_val_loss,
        "steps": record.steps,
        "ticks": len(record.tick_ms),
        "total_time_s": record.total_time_s,
    }
    (out_dir / "run.json").write_text(json.dumps(run_info, indent=2) + "\n", encoding="utf-8")


def load_record(run_dir: Path) -> RunRecord:
    """Rebuild a RunRecord (metadata + epoch metrics) from a run directory."""
    try:
        info = json.loads((run_dir / "run.json").read_text(encoding="utf-8"))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise SummaryError(f"unreadable run record in {run_dir}: {e}") from e

    record = RunRecord(
        config_name=str(info["config"]),
        label=str(info.get("label", "")),
        mode=str(info["mode"]),
        lambda_base=float(info["lambda_base"]),
        seed=int(info["seed"]),
        steps=int(info.get("steps", 0)),
        total_time_s=float(info.get("total_time_s", 0.0)),
    )
    metrics_path = run_dir / "metrics.csv"
    if metrics_path.exists():
        with metrics_path.open(newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                record.epochs.append(
                    EpochMetrics(
                        epoch=int(row["epoch"]),
                        train_loss=float(row["train_loss"]),
                        train_acc=float(row["train_acc"]),
                        val_loss=float(row["val_loss"]),
                        val_acc=float(row["val_acc"]),
                        epoch_time_s=float(row["epoch_time_s"]),
                    )
                )
    return record


def load_records(root: Path) -> list[RunRecord]:
    return [load_record(p.parent) for p in sorted(root.rglob("run.json"))]


def _fixed_probe_batch(train: Dataset, size: int, seed: int) -> Array:
    idx = np.random.default_rng(seed).permutation(len(train))[: min(size, len(train))]
    return train.samples[np.sort(idx)]


def _abort_non_finite(
    cfg: RunConfig,
    seed: int,
    step: int,
    value: float,
    assignment: DecayAssignment,
    out_dir: Path | None,
) -> NonFiniteLossError:
    diagnostic = {
        "config": cfg.name,
        "seed": seed,
        "step": step,
        "loss": repr(value),
        "mode": cfg.scheduler.mode,
        "lambdas": assignment.values,
    }
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "failure.json").write_text(
            json.dumps(diagnostic, indent=2) + "\n", encoding="utf-8"
        )
    return NonFiniteLossError(
        f"non-finite loss {value!r} at step {step} ({cfg.name}, seed {seed})", diagnostic
    )


def run_experiment(
    cfg: RunConfig,
    seed: int,
    out_dir: Path | None = None,
    *,
    label: str = "",
    quiet: bool = False,
) -> RunRecord:
    """Seeded training run following the scheduler loop; traces are flushed to out_dir."""
    sched_cfg = cfg.scheduler
    dataset = load_dataset(cfg.data)
    train, val = split_dataset(dataset, cfg.data.val_fraction, cfg.data.seed)
    net = build_network(
        cfg.model.layers, train.feature_shape, train.num_classes, seed, dtype=cfg.training.dtype
    )
    if sched_cfg.mode == "ouidecay" and not net.monitored:
        raise ConfigError("ouidecay needs at least one monitored relu layer")

    batch_size = cfg.training.batch_size
    total_steps = cfg.training.epochs * math.ceil(len(train) / batch_size)
    if cfg.training.max_steps is not None:
        total_steps = min(total_steps, cfg.training.max_steps)
    warmup = cfg.optimizer.warmup_steps
    if warmup >= total_steps:
        warmup = max(total_steps - 1, 0)
        console.print(
            f"[warn]⚠ warmup_steps={cfg.optimizer.warmup_steps} does not fit in {total_steps} "
            f"steps; warming up over {warmup}.[/]"
        )
    lr_sched = LrSchedule(
        base_lr=cfg.optimizer.base_lr,
        min_lr=cfg.optimizer.min_lr,
        warmup_steps=warmup,
        total_steps=total_steps,
    )
    state = OptimizerState(
        mode=cfg.optimizer.mode,
        beta1=cfg.optimizer.beta1,
        beta2=cfg.optimizer.beta2,
        eps=cfg.optimizer.eps,
    )
    probe_x = _fixed_probe_batch(train, sched_cfg.probe_size, cfg.data.seed)

    record = RunRecord(
        config_name=cfg.name,
        label=label,
        mode=sched_cfg.mode,
        lambda_base=sched_cfg.lambda_base,
        seed=seed,
    )
    # uniform lambda_base until the first tick
    assignment = DecayAssignment.uniform(0, net.decayed_layers, sched_cfg.lambda_base)
    step = 0 if sched_cfg.zero_based_steps else 1
    opt_steps = 0
    run_t0 = time.perf_counter()

    for epoch in range(1, cfg.training.epochs + 1):
        epoch_t0 = time.perf_counter()
        loss_sum = 0.0
        seen = 0
        for x, y in batches(train, batch_size, seed, epoch, flip=cfg.data.flip):
            it0 = time.perf_counter()
            tick = sched_cfg.mode == "ouidecay" and is_tick(step, sched_cfg)
            reuse = tick and sched_cfg.probe_source == "train_batch" and x.shape[0] >= 2

            trace = forward(net, x, capture=reuse)
            batch_loss = loss(trace.logits, y)
            if not math.isfinite(batch_loss):
                raise _abort_non_finite(cfg, seed, step, batch_loss, assignment, out_dir)
            grads = backward(net, trace, y)
            if cfg.optimizer.clip_norm is not None:
                clip_grad_norm(grads, cfg.optimizer.clip_norm)

            multipliers: dict[str, Array] | None = None
            if tick:
                tick_t0 = time.perf_counter()
                assignment = scheduler_tick(
                    step,
                    net,
                    x if reuse else probe_x,
                    sched_cfg,
                    assignment,
                    trace=trace if reuse else None,
                )
                record.tick_ms.append((step, (time.perf_counter() - tick_t0) * 1000.0))
                if assignment.source is not None:
                    record.oui_trace.extend(
                        (step, layer_id, oui) for layer_id, oui in assignment.source.values.items()
                    )
            elif sched_cfg.mode != "ouidecay":
                assignment = scheduler_tick(step, net, x, sched_cfg, assignment)
                if sched_cfg.mode == "adadecay":
                    multipliers = adadecay_factors(
                        {layer_id: grads[layer_id]["weight"] for layer_id in net.decayed_layers},
                        sched_cfg.adadecay_alpha,
                    )

            lr = lr_at(lr_sched, opt_steps)
            apply_step(state, net.params, grads, lr, assignment, multipliers)

            if tick or step % cfg.output.lambda_every == 0:
                record.lambda_trace.extend(
                    (step, layer_id, lam) for layer_id, lam in assignment.values.items()
                )
            record.iter_ms.append((time.perf_counter() - it0) * 1000.0)
            loss_sum += batch_loss * x.shape[0]
            seen += x.shape[0]
            step += 1
            opt_steps += 1
            if opt_steps >= total_steps:
                break

        _, train_acc = evaluate(net, train.samples, train.labels)
        val_loss, val_acc = evaluate(net, val.samples, val.labels)
        elapsed = time.perf_counter() - epoch_t0 if cfg.output.wall_time else 0.0
        record.epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=loss_sum / max(seen, 1),
                train_acc=train_acc,
                val_loss=val_loss,
                val_acc=val_acc,
                epoch_time_s=elapsed,
            )
        )
        if not quiet:
            console.print(
                f"[dim]{label or cfg.name} seed={seed} epoch {epoch}/{cfg.training.epochs}  "
                f"train {loss_sum / max(seen, 1):.4f}  val {val_loss:.4f}  "
                f"acc {val_acc:.3f}  {elapsed:.2f}s[/]"
            )
        if opt_steps >= total_steps:
            break

    record.steps = opt_steps
    record.total_time_s = time.perf_counter() - run_t0
    if out_dir is not None:
        write_run_outputs(record, out_dir)
    return record


# ----------------------------
# Summaries + overhead
# ----------------------------


@dataclass(frozen=True)
class SummaryRow:
    config: str
    point: str
    mode: str
    lambda_base: float
    mean_best_val_loss: float
    std_best_val_loss: float
    n_runs: int
    total_runtime_s: float
    flagged_best: bool = False


SUMMARY_HEADER = [
    "config",
    "mode",
    "lambda_base",
    "mean_best_val_loss",
    "std_best_val_loss",
    "flagged_best",
    "point",
    "n_runs",
    "total_runtime_s",
]


def summarize(records: Sequence[RunRecord], *, decimals: int = 6) -> list[SummaryRow]:
    """Mean and sample std of best validation loss per (config, point, mode, lambda_base).

    Within each (config, lambda_base) row, every group whose mean ties the lowest one
    (compared at `decimals`) is flagged best.
    """
    if not records:
        raise SummaryError("no run records to summarize")

    groups: dict[tuple[str, str, str, float], list[RunRecord]] = {}
    for rec in records:
        key = (rec.config_name, rec.label, rec.mode, rec.lambda_base)
        groups.setdefault(key, []).append(rec)

    rows: list[SummaryRow] = []
    for (config, point, mode, lam), recs in groups.items():
        losses = np.array([r.best_val_loss for r in recs], dtype=np.float64)
        if losses.size == 0 or not np.all(np.isfinite(losses)):
            raise SummaryError(f"group {config}/{point or mode}/{lam:g} has no finite best loss")
        rows.append(
            SummaryRow(
                config=config,
                point=point,
                mode=mode,
                lambda_base=lam,
                mean_best_val_loss=float(losses.mean()),
                std_best_val_loss=float(losses.std(ddof=1)) if losses.size > 1 else 0.0,
                n_runs=int(losses.size),
                total_runtime_s=float(sum(r.total_time_s for r in recs)),
            )
        )

    best: dict[tuple[str, float], float] = {}
    for row in rows:
        mean = round(row.mean_best_val_loss, decimals)
        key = (row.config, row.lambda_base)
        best[key] = min(best.get(key, math.inf), mean)
    return [
        replace(
            row,
            flagged_best=round(row.mean_best_val_loss, decimals)
            == best[(row.config, row.lambda_base)],
        )
        for row in rows
    ]


def format_mean_std(mean: float, std: float, decimals: int = 2) -> str:
    return f"{mean:.{decimals}f} ± {std:.{decimals}f}"


def write_summary_csv(rows: Sequence[SummaryRow], path: Path) -> None:
    _write_csv(
        path,
        SUMMARY_HEADER,
        [
            [
                r.config,
                r.mode,
                r.lambda_base,
                f"{r.mean_best_val_loss:.6f}",
                f"{r.std_best_val_loss:.6f}",
                "true" if r.flagged_best else "false",
                r.point,
                r.n_runs,
                f"{r.total_runtime_s:.3f}",
            ]
            for r in rows
        ],
    )


def render_summary(rows: Sequence[SummaryRow], decimals: int = 4) -> None:
    table = Table(title=f"Best validation loss ({len(rows)} groups)", box=box.SIMPLE)
    table.add_column("Config", style="accent")
    table.add_column("Point", style="path")
    table.add_column("Mode")
    table.add_column("λ_base", justify="right")
    table.add_column("Best val. loss", justify="right")
    table.add_column("Runs", justify="right")
    table.add_column("Time", justify="right")
    for r in rows:
        cell = format_mean_std(r.mean_best_val_loss, r.std_best_val_loss, decimals)
        table.add_row(
            r.config,
            r.point or "-",
            r.mode,
            f"{r.lambda_base:g}",
            f"[ok]{cell}[/]" if r.flagged_best else cell,
            str(r.n_runs),
            f"{r.total_runtime_s:.1f}s",
        )
    console.print(table)


@dataclass(frozen=True)
class OverheadReport:
    iter_ms: float
    tick_ms: float
    pct: float
    n_iters: int
    n_ticks: int


def overhead_ratio(iter_ms: float, tick_ms: float) -> float:
    """Tick cost as a percentage of one full training iteration."""
    if not iter_ms > 0:
        raise InsufficientSamplesError("iteration time must be positive")
    return 100.0 * tick_ms / iter_ms


def overhead_from_record(record: RunRecord) -> OverheadReport:
    if len(record.tick_ms) < 3:
        raise InsufficientSamplesError(
            f"need at least 3 scheduler ticks to measure overhead, observed {len(record.tick_ms)}"
        )
    iter_mean = float(np.mean(record.iter_ms))
    tick_mean = float(np.mean([ms for _, ms in record.tick_ms]))
    return OverheadReport(
        iter_ms=iter_mean,
        tick_ms=tick_mean,
        pct=overhead_ratio(iter_mean, tick_mean),
        n_iters=len(record.iter_ms),
        n_ticks=len(record.tick_ms),
    )


def measure_overhead(
    cfg: RunConfig, seed: int | None = None, *, quiet: bool = True
) -> OverheadReport:
    if cfg.scheduler.mode != "ouidecay":
        raise ConfigError(
            f"overhead needs scheduler.mode=ouidecay; {cfg.scheduler.mode} has no tick to measure"
        )
    record = run_experiment(cfg, cfg.seeds[0] if seed is None else seed, quiet=quiet)
    return overhead_from_record(record)


def write_timing_csv(report: OverheadReport, path: Path) -> None:
    _write_csv(
        path,
        ["iter_ms", "tick_ms", "pct"],
        [[f"{report.iter_ms:.6f}", f"{report.tick_ms:.6f}", f"{report.pct:.6f}"]],
    )


# ----------------------------
# Sweeps
# ----------------------------


def lambda_pair(cfg: RunConfig) -> tuple[RunConfig, RunConfig]:
    """The config and its twin whose lambda_base is five times larger; nothing else differs."""
    low = cfg.scheduler.lambda_base
    return cfg, replace(cfg, scheduler=replace(cfg.scheduler, lambda_base=low * 5.0))


def _axis_points(cfg: RunConfig, axis: str) -> list[tuple[str, RunConfig]]:
    sched = cfg.scheduler
    if axis == "t_tilde":
        return [
            (f"t_tilde={t}", replace(cfg, scheduler=replace(sched, t_tilde=t)))
            for t in cfg.sweep.t_tilde
        ]
    if axis == "scaling":
        return [
            (f"scaling={s1:g}-{s2:g}", replace(cfg, scheduler=replace(sched, s1=s1, s2=s2)))
            for s1, s2 in cfg.sweep.scaling
        ]
    if axis == "lambda_pair":
        return [(f"lambda_base={c.scheduler.lambda_base:g}", c) for c in lambda_pair(cfg)]
    if axis == "mode":
        return [
            (f"mode={m}", replace(cfg, scheduler=replace(sched, mode=m))) for m in cfg.sweep.modes
        ]
    raise ConfigError(f"sweep axis must be one of: {', '.join(SWEEP_AXES)} (got {axis})")


def expand_axes(cfg: RunConfig, axes: Sequence[str]) -> list[tuple[str, RunConfig]]:
    """Cartesian product of the requested axes, labelled like `t_tilde=64,mode=ouidecay`."""
    if not axes:
        raise ConfigError("sweep needs at least one axis")
    points: list[tuple[str, RunConfig]] = [("", cfg)]
    for axis in axes:
        expanded: list[tuple[str, RunConfig]] = []
        for label, point_cfg in points:
            sub = _axis_points(point_cfg, axis)
            if not sub:
                raise ConfigError(f"sweep axis {axis} has no values")
            expanded.extend(
                (f"{label},{sub_label}" if label else sub_label, sub_cfg)
                for sub_label, sub_cfg in sub
            )
        points = expanded
    return points


def _point_dir(label: str) -> str:
    return label.replace(",", "__").replace("=", "-")


def sweep(
    base_cfg: RunConfig,
    axes: Sequence[str],
    out_root: Path,
    *,
    workers: int = 1,
    quiet: bool = False,
) -> list[SummaryRow]:
    """One run per axis point per seed, then a consolidated summary.csv under out_root."""
    points = expand_axes(base_cfg, axes)
    jobs = [(label, point_cfg, seed) for label, point_cfg in points for seed in point_cfg.seeds]

    def _run(job: tuple[str, RunConfig, int]) -> RunRecord:
        label, point_cfg, seed = job
        run_dir = out_root / _point_dir(label) / f"seed{seed}"
        return run_experiment(point_cfg, seed, run_dir, label=label, quiet=quiet)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="sweep") as pool:
            records = list(pool.map(_run, jobs))
    else:
        records = [_run(job) for job in jobs]

    rows = summarize(records)
    write_summary_csv(rows, out_root / "summary.csv")
    return rows


# ----------------------------
# Main
# ----------------------------


def render_header(cfg: RunConfig, command: str, out_root: Path | None = None) -> None:
    """Render a stylish startup header using Rich."""
    sched = cfg.scheduler
    opt = cfg.optimizer
    table = Table(show_header=False, box=None, padding=(0, 1))
    table.add_column("key", style="cyan")
    table.add_column("val")
    table.add_row("Command", f"[bold]{command}[/]")
    table.add_row("Config", cfg.name)
    table.add_row("Data", f"{cfg.data.kind} (n={cfg.data.n}, classes={cfg.data.classes})")
    table.add_row("Layers", " → ".join(spec.kind for spec in cfg.model.layers))
    table.add_row(
        "Optimizer",
        f"{opt.mode} lr {opt.base_lr:g}→{opt.min_lr:g} warmup={opt.warmup_steps}",
    )
    table.add_row(
        "Decay",
        f"{sched.mode} λ_base={sched.lambda_base:g} t̃={sched.t_tilde} "
        f"range=({sched.s1:g}, {sched.s2:g})",
    )
    table.add_row("Seeds", ", ".join(str(s) for s in cfg.seeds))
    if out_root is not None:
        table.add_row("Output", str(out_root))

    console.rule("[title]OUIDecay Lab[/]")
    console.print(Panel(table, title="🧪 Config", border_style="magenta", box=box.ROUNDED))


def parse_args(argv: Sequence[str] | None = None) -> argparse.Namespace:
    ap = argparse.ArgumentParser(prog="ouidecay-lab")
    sub = ap.add_subparsers(dest="command", required=True)

    train_p = sub.add_parser("train", help="Run seeded training for one config")
    train_p.add_argument("--config", required=True, help="Path to a run config YAML")
    train_p.add_argument(
        "--seed", type=int, default=None, help="Single seed (default: config seeds)"
    )
    train_p.add_argument("--out", default=None, help="Output directory")
    train_p.add_argument("-q", "--quiet", action="store_true", help="Suppress per-epoch lines")

    sweep_p = sub.add_parser("sweep", help="Run an ablation grid and summarize it")
    sweep_p.add_argument("--config", required=True, help="Path to a run config YAML")
    sweep_p.add_argument(
        "--axis", action="append", required=True, choices=SWEEP_AXES, help="Repeat to cross axes"
    )
    sweep_p.add_argument("--out", default=None, help="Output directory")
    sweep_p.add_argument("--workers", type=int, default=1, help="Parallel runs (threads)")
    sweep_p.add_argument("-q", "--quiet", action="store_true", help="Suppress per-epoch lines")

    sum_p = sub.add_parser("summarize", help="Summarize every run.json under a directory")
    sum_p.add_argument("--in", dest="in_dir", required=True, help="Directory holding runs")
    sum_p.add_argument("--out", default=None, help="summary.csv path (default: <in>/summary.csv)")

    over_p = sub.add_parser("overhead", help="Measure OUI tick cost against a full iteration")
    over_p.add_argument("--config", required=True, help="Path to a run config YAML")
    over_p.add_argument("--seed", type=int, default=None)
    over_p.add_argument("--max-steps", type=int, default=None, help="Stop after this many steps")
    over_p.add_argument("--out", default=None, help="Directory for timing.csv")

    exp_p = sub.add_parser("export", help="Write the configured dataset as CSV or IDX")
    exp_p.add_argument("--config", required=True, help="Path to a run config YAML")
    exp_p.add_argument("--out", required=True, help="Output directory")
    exp_p.add_argument("--format", choices=("csv", "idx"), default="csv")
    return ap.parse_args(argv)


def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(Path(args.config))
    out_root = resolve_output_root(cfg, args.out)
    render_header(cfg, "train", out_root)

    if args.seed is not None:
        runs = [(args.seed, out_root)]
    else:
        runs = [(seed, out_root / f"seed{seed}") for seed in cfg.seeds]

    records: list[RunRecord] = []
    for seed, run_dir in runs:
        record = run_experiment(cfg, seed, run_dir, quiet=args.quiet)
        console.print(
            f"[ok]✅ seed {seed}: best val loss {record.best_val_loss:.4f} "
            f"({record.steps} steps, {len(record.tick_ms)} ticks)[/] [path]{run_dir}[/]"
        )
        records.append(record)

    if len(records) > 1:
        rows = summarize(records)
        write_summary_csv(rows, out_root / "summary.csv")
        render_summary(rows)
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_config(Path(args.config))
    out_root = resolve_output_root(cfg, args.out)
    render_header(cfg, f"sweep ({' × '.join(args.axis)})", out_root)
    rows = sweep(cfg, args.axis, out_root, workers=max(1, args.workers), quiet=args.quiet)
    render_summary(rows)
    console.print(f"[ok]✅ summary written:[/] [path]{out_root / 'summary.csv'}[/]")
    return 0


def cmd_summarize(args: argparse.Namespace) -> int:
    in_dir = Path(_expand_path(args.in_dir))
    records = load_records(in_dir)
    if not records:
        raise SummaryError(f"no run.json found under {in_dir}")
    rows = summarize(records)
    render_summary(rows)
    out_path = Path(_expand_path(args.out)) if args.out else in_dir / "summary.csv"
    write_summary_csv(rows, out_path)
    console.print(f"[ok]✅ summary written:[/] [path]{out_path}[/]")
    return 0


def cmd_overhead(args: argparse.Namespace) -> int:
    cfg = load_config(Path(args.config))
    if args.max_steps is not None:
        cfg = replace(cfg, training=replace(cfg.training, max_steps=args.max_steps))
    render_header(cfg, "overhead")
    report = measure_overhead(cfg, seed=args.seed)
    console.print(
        f"[info]ℹ full iteration {report.iter_ms:.3f} ms, OUI/WD tick {report.tick_ms:.4f} ms "
        f"→ {report.pct:.3f}% of an iteration "
        f"({report.n_ticks} ticks over {report.n_iters} steps)[/]"
    )
    if args.out:
        path = Path(_expand_path(args.out)) / "timing.csv"
        write_timing_csv(report, path)
        console.print(f"[ok]✅ timing written:[/] [path]{path}[/]")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    cfg = load_config(Path(args.config))
    ds = load_dataset(cfg.data)
    out_dir = Path(_expand_path(args.out))
    if args.format == "csv":
        path = out_dir / f"{cfg.name}.csv"
        export_csv(ds, path)
        console.print(f"[ok]✅ {len(ds)} samples written:[/] [path]{path}[/]")
        return 0

    if ds.samples.ndim != 4 or ds.samples.shape[1] != 1:
        raise InputError("IDX export needs single-channel image data")
    pixels = np.rint(np.clip(ds.samples[:, 0], 0.0, 1.0) * 255.0).astype(np.uint8)
    write_idx(out_dir / "images-idx3-ubyte", pixels)
    write_idx(out_dir / "labels-idx1-ubyte", ds.labels.astype(np.uint8))
    console.print(f"[ok]✅ {len(ds)} images written as IDX:[/] [path]{out_dir}[/]")
    return 0


_COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "summarize": cmd_summarize,
    "overhead": cmd_overhead,
    "export": cmd_export,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except FileNotFoundError as e:
        console.print(f"[err]❌ {e}[/]")
        return ConfigError.exit_code
    except LabError as e:
        console.print(f"[err]❌ {e}[/]")
        return e.exit_code
    except KeyboardInterrupt:
        console.print("\n[dim]⏹ Interrupted. Bye.[/]")
        return 130


if __name__ == "__main__":
    sys.exit(main())
