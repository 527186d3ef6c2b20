"""Experiment configuration: dataclass, flat key=value file format, overrides.

The file format is sectioned plain text ("[section]" headers, "key = value"
lines, '#' comments).  Every knob is serialized by format_config, so a config
snapshot embedded in a run manifest reproduces the run exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import Pose, Quaternion
from .optim import TrainConfig

ABLATIONS = ("none", "no_reset", "keep_synthetic")


class ConfigError(ValueError):
    """Malformed configuration; carries the offending key for diagnostics."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class ExperimentConfig:
    scene_preset: str = "reference"
    grid_resolution: tuple[int, int, int] = (64, 64, 64)
    gt_resolution: tuple[int, int, int] = (96, 96, 96)
    bbox_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bbox_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    n_train_cameras: int = 6
    n_test_cameras: int = 6
    orbit_radius: float = 2.3
    orbit_height: float = 0.75
    orbit_target: tuple[float, float, float] = (0.0, 0.0, -0.3)
    image_width: int = 64
    image_height: int = 48
    focal: float = 64.0
    near: float = 0.7
    far: float = 4.2

    factor_preset: str | None = "seven_x"
    factor_n: int | None = None
    random_views: int = 0
    target_poses: list[Pose] | None = None

    masks_enabled: bool = True
    mask_kind: str = "quantile"
    mask_value: float = 0.10

    hessian_lam: float = 1e-2
    hessian_max_rays: int = 200_000
    hessian_n_samples: int = 64

    render_n_samples: int = 96
    gt_n_samples: int = 160

    rounds: int = 2
    ablation: str = "none"
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("run.rounds", "must be >= 1")
        if self.ablation not in ABLATIONS:
            raise ConfigError("run.ablation", f"must be one of {ABLATIONS}")
        if self.factor_preset is not None and self.factor_n is not None:
            raise ConfigError("augment.factor_n", "set factor_preset or factor_n, not both")
        if self.mask_kind not in ("absolute", "quantile"):
            raise ConfigError("mask.kind", "must be 'absolute' or 'quantile'")


def _fmt_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(_fmt_value(v) for v in value)
    if value is None:
        return "none"
    return str(value)


def _fmt_poses(poses: list[Pose] | None) -> str:
    if not poses:
        return "none"
    chunks = []
    for p in poses:
        q = p.rotation
        vals = (*p.position, q.w, q.x, q.y, q.z)
        chunks.append(" ".join(repr(float(v)) for v in vals))
    return " ; ".join(chunks)


def _parse_poses(raw: str) -> list[Pose] | None:
    if raw.strip() == "none":
        return None
    poses = []
    for chunk in raw.split(";"):
        vals = [float(tok) for tok in chunk.split()]
        if len(vals) != 7:
            raise ValueError(f"pose needs 7 numbers (px py pz qw qx qy qz), got {len(vals)}")
        poses.append(Pose(np.array(vals[:3]), Quaternion.from_array(vals[3:])))
    return poses


def format_config(config: ExperimentConfig) -> str:
    """Full flat-text rendering of the config; parse_config inverts it."""
    t = config.train
    sections = [
        ("scene", [("preset", config.scene_preset)]),
        (
            "grid",
            [
                ("resolution", config.grid_resolution),
                ("gt_resolution", config.gt_resolution),
                ("bbox_min", config.bbox_min),
                ("bbox_max", config.bbox_max),
            ],
        ),
        (
            "cameras",
            [
                ("n_train", config.n_train_cameras),
                ("n_test", config.n_test_cameras),
                ("orbit_radius", config.orbit_radius),
                ("orbit_height", config.orbit_height),
                ("orbit_target", config.orbit_target),
                ("image_width", config.image_width),
                ("image_height", config.image_height),
                ("focal", config.focal),
                ("near", config.near),
                ("far", config.far),
            ],
        ),
        (
            "augment",
            [
                ("factor_preset", config.factor_preset),
                ("factor_n", config.factor_n),
                ("random_views", config.random_views),
                ("target_poses", _fmt_poses(config.target_poses)),
            ],
        ),
        (
            "mask",
            [
                ("enabled", config.masks_enabled),
                ("kind", config.mask_kind),
                ("value", config.mask_value),
            ],
        ),
        (
            "uncertainty",
            [
                ("lam", config.hessian_lam),
                ("max_rays", config.hessian_max_rays),
                ("n_samples", config.hessian_n_samples),
            ],
        ),
        (
            "render",
            [("n_samples", config.render_n_samples), ("gt_n_samples", config.gt_n_samples)],
        ),
        (
            "train",
            [
                ("iterations", t.iterations),
                ("batch_rays", t.batch_rays),
                ("learning_rate", t.learning_rate),
                ("learning_rate_color", t.learning_rate_color),
                ("adam_beta1", t.adam_beta1),
                ("adam_beta2", t.adam_beta2),
                ("adam_eps", t.adam_eps),
                ("n_samples", t.n_samples),
                ("synthetic_stop_fraction", t.synthetic_stop_fraction),
                ("tv_weight", t.tv_weight),
                ("seed", t.seed),
            ],
        ),
        (
            "run",
            [("rounds", config.rounds), ("seed", config.seed), ("ablation", config.ablation)],
        ),
    ]
    lines = []
    for name, entries in sections:
        lines.append(f"[{name}]")
        for key, value in entries:
            rendered = value if isinstance(value, str) else _fmt_value(value)
            lines.append(f"{key} = {rendered}")
        lines.append("")
    return "\n".join(lines)


def _read_pairs(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            section = stripped[1:-1].strip()
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        full = f"{section}.{key.strip()}" if section else key.strip()
        pairs[full] = value.strip()
    return pairs


def _opt(parse):
    def inner(raw: str):
        return None if raw.strip() == "none" else parse(raw)

    return inner


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


def _ints(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.split())


def _floats(raw: str) -> tuple[float, ...]:
    return tuple(float(tok) for tok in raw.split())


# key -> (attribute path, parser)
_SCHEMA = {
    "scene.preset": ("scene_preset", str.strip),
    "grid.resolution": ("grid_resolution", _ints),
    "grid.gt_resolution": ("gt_resolution", _ints),
    "grid.bbox_min": ("bbox_min", _floats),
    "grid.bbox_max": ("bbox_max", _floats),
    "cameras.n_train": ("n_train_cameras", int),
    "cameras.n_test": ("n_test_cameras", int),
    "cameras.orbit_radius": ("orbit_radius", float),
    "cameras.orbit_height": ("orbit_height", float),
    "cameras.orbit_target": ("orbit_target", _floats),
    "cameras.image_width": ("image_width", int),
    "cameras.image_height": ("image_height", int),
    "cameras.focal": ("focal", float),
    "cameras.near": ("near", float),
    "cameras.far": ("far", float),
    "augment.factor_preset": ("factor_preset", _opt(str.strip)),
    "augment.factor_n": ("factor_n", _opt(int)),
    "augment.random_views": ("random_views", int),
    "augment.target_poses": ("target_poses", _parse_poses),
    "mask.enabled": ("masks_enabled", _bool),
    "mask.kind": ("mask_kind", str.strip),
    "mask.value": ("mask_value", float),
    "uncertainty.lam": ("hessian_lam", float),
    "uncertainty.max_rays": ("hessian_max_rays", int),
    "uncertainty.n_samples": ("hessian_n_samples", int),
    "render.n_samples": ("render_n_samples", int),
    "render.gt_n_samples": ("gt_n_samples", int),
    "train.iterations": ("train.iterations", int),
    "train.batch_rays": ("train.batch_rays", int),
    "train.learning_rate": ("train.learning_rate", float),
    "train.learning_rate_color": ("train.learning_rate_color", float),
    "train.adam_beta1": ("train.adam_beta1", float),
    "train.adam_beta2": ("train.adam_beta2", float),
    "train.adam_eps": ("train.adam_eps", float),
    "train.n_samples": ("train.n_samples", int),
    "train.synthetic_stop_fraction": ("train.synthetic_stop_fraction", float),
    "train.tv_weight": ("train.tv_weight", float),
    "train.seed": ("train.seed", int),
    "run.rounds": ("rounds", int),
    "run.seed": ("seed", int),
    "run.ablation": ("ablation", str.strip),
}


def parse_config(text: str, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    """Build an ExperimentConfig from flat text plus 'section.key=value' overrides."""
    pairs = _read_pairs(text)
    if overrides:
        for key, value in overrides.items():
            if key not in _SCHEMA:
                raise ConfigError(key, "unknown config key")
            pairs[key] = value
    top: dict = {}
    train_kwargs: dict = {}
    for key, raw in pairs.items():
        if key not in _SCHEMA:
            raise ConfigError(key, "unknown config key")
        attr, parse = _SCHEMA[key]
        try:
            value = parse(raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(key, str(exc)) from None
        if attr.startswith("train."):
            train_kwargs[attr.split(".", 1)[1]] = value
        else:
            top[attr] = value
    try:
        train = TrainConfig(**train_kwargs)
        return ExperimentConfig(train=train, **top)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError("config", str(exc)) from None


def load_config(path, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    with open(path) as fh:
        return parse_config(fh.read(), overrides)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    return replace(config, seed=seed)
