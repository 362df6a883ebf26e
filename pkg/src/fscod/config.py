"""Experiment configuration: presets, YAML loading, hashing.

A config resolves from three layers, later wins: preset geometry, YAML
file, command-line overrides. Every output file produced from a config
embeds a short hash of it so datasets, trained parameters, and reports
cannot silently mix.

Hashing is split in two because the stages depend on different fields:
data_hash covers only what shapes the dataset (world geometry, sensor,
scene statistics, frame counts, seed), config_hash covers everything.
Retraining with a new learning rate keeps the dataset valid; touching
the world geometry invalidates it.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from .geometry import BevGrid
from .pipeline import DEFAULT_ANCHORS, PipelineConfig
from .sim import SceneParams
from .types import LidarSpec


class ConfigError(ValueError):
    pass


# preset: world half-extent (m), feature stride s. Both keep 128 px BEVs
# and 2.5 m detection cells; "lo" trades pixel size for a 20 m range.
PRESETS = {
    "lo": {"extent_m": 20.0, "s": 8},
    "hi": {"extent_m": 10.0, "s": 16},
}


@dataclass
class ExperimentConfig:
    seed: int
    preset: str = "lo"
    extent_m: float = 20.0
    s: int = 8
    bev_size: int = 128
    n_max: int = 32
    # scene statistics
    train_frames: int = 1000
    val_frames: int = 100
    target_count: tuple[int, int] = (3, 6)
    obstacle_count: tuple[int, int] = (1, 2)
    # sensor
    azimuth_step: float = 0.025
    noise_sigma: float = 0.02
    # model / training
    ct: tuple[int, ...] = (8,)
    channel_scale: int = 8
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS
    optimizer: str = "adam"
    lr: float = 5e-4
    momentum: float = 0.9  # SGD velocity decay, Adam beta1
    epochs: int = 20
    augment: bool = True  # random grid symmetry per training step
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    # inference / scoring
    conf_threshold: float = 0.4
    iou_threshold: float = 0.5
    nms_iou: float = 0.5
    iou_sweep: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    # transport
    message_dtype: str = "f32"
    drop_probability: float = 0.0
    latency_ms: float = 5.0
    jitter_ms: float = 3.0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}, have {sorted(PRESETS)}")
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        self.ct = tuple(int(c) for c in self.ct)
        self.anchors = tuple((float(w), float(l)) for w, l in self.anchors)
        self.target_count = (int(self.target_count[0]), int(self.target_count[1]))
        self.obstacle_count = (int(self.obstacle_count[0]), int(self.obstacle_count[1]))
        self.iou_sweep = tuple(float(t) for t in self.iou_sweep)
        if not self.ct or any(c < 1 for c in self.ct):
            raise ConfigError(f"ct must list positive channel counts, got {self.ct}")
        if len(set(self.ct)) != len(self.ct):
            raise ConfigError(f"ct has duplicates: {self.ct}")
        if self.train_frames < 1 or self.val_frames < 1:
            raise ConfigError("train_frames and val_frames must be positive")
        if self.message_dtype not in ("f32", "f16", "q8"):
            raise ConfigError(f"message_dtype must be f32, f16, or q8, got {self.message_dtype!r}")
        if not 0.0 <= self.drop_probability <= 1.0:
            raise ConfigError(f"drop_probability must be in [0, 1], got {self.drop_probability}")
        if not 0.0 < self.conf_threshold < 1.0:
            raise ConfigError(f"conf_threshold must be in (0, 1), got {self.conf_threshold}")
        if self.lr <= 0 or self.epochs < 1:
            raise ConfigError("lr must be positive and epochs at least 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")

    # derived objects

    def grid(self) -> BevGrid:
        return BevGrid(extent_m=self.extent_m, size=self.bev_size, n_max=self.n_max)

    def lidar_spec(self) -> LidarSpec:
        return LidarSpec(
            range_m=self.extent_m,
            azimuth_step=self.azimuth_step,
            noise_sigma=self.noise_sigma,
        )

    def scene_params(self) -> SceneParams:
        # keep targets inside 85% of range and sensors in the middle 60%
        return SceneParams(
            extent=self.extent_m,
            target_count=self.target_count,
            obstacle_count=self.obstacle_count,
            max_target_range=0.85 * self.extent_m,
            sensor_region=0.6 * self.extent_m,
            min_sensor_separation=0.4 * self.extent_m,
        )

    def pipeline_config(self, c_t: int) -> PipelineConfig:
        return PipelineConfig(
            grid=self.grid(),
            s=self.s,
            c_t=c_t,
            channel_scale=self.channel_scale,
            anchors=self.anchors,
            conf_threshold=self.conf_threshold,
            lambda_coord=self.lambda_coord,
            lambda_noobj=self.lambda_noobj,
        )

    # hashing

    _DATA_FIELDS = (
        "seed", "preset", "extent_m", "s", "bev_size", "n_max",
        "train_frames", "val_frames", "target_count", "obstacle_count",
        "azimuth_step", "noise_sigma",
    )

    def _digest(self, payload: dict) -> str:
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    _TRAIN_FIELDS = _DATA_FIELDS + (
        "ct", "channel_scale", "anchors", "optimizer", "lr", "momentum",
        "epochs", "augment", "lambda_coord", "lambda_noobj",
    )

    def data_hash(self) -> str:
        d = dataclasses.asdict(self)
        return self._digest({k: d[k] for k in self._DATA_FIELDS})

    def train_hash(self) -> str:
        d = dataclasses.asdict(self)
        return self._digest({k: d[k] for k in self._TRAIN_FIELDS})

    def config_hash(self) -> str:
        return self._digest(dataclasses.asdict(self))


_FIELD_NAMES = {f.name for f in dataclasses.fields(ExperimentConfig)}
# tuple-typed fields, for YAML lists
_PAIR_FIELDS = {"target_count", "obstacle_count"}


def _coerce(name: str, value):
    if name in _PAIR_FIELDS or name in ("ct", "iou_sweep"):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{name} must be a list, got {value!r}")
        if name in _PAIR_FIELDS and len(value) != 2:
            raise ConfigError(f"{name} must have exactly two entries, got {value!r}")
        return tuple(value)
    if name == "anchors":
        try:
            return tuple((float(w), float(l)) for w, l in value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"anchors must be a list of [w, l] pairs: {e}") from e
    return value


def load_config(
    path: str | None = None,
    *,
    seed: int | None = None,
    preset: str | None = None,
    ct: tuple[int, ...] | None = None,
) -> ExperimentConfig:
    """Resolve a config from an optional YAML file plus CLI overrides.

    The preset fills extent_m and s unless the file or flags pin them
    explicitly. seed has no default: it must come from the file or the
    flag.
    """
    raw: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a mapping at top level")
        raw.update(loaded)

    unknown = sorted(set(raw) - _FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    if preset is not None:
        raw["preset"] = preset
    if seed is not None:
        raw["seed"] = seed
    if ct is not None:
        raw["ct"] = ct

    if "seed" not in raw:
        raise ConfigError("seed is required (config file key 'seed' or flag --seed)")

    chosen = raw.get("preset", "lo")
    if chosen not in PRESETS:
        raise ConfigError(f"unknown preset {chosen!r}, have {sorted(PRESETS)}")
    for key, value in PRESETS[chosen].items():
        raw.setdefault(key, value)

    kwargs = {}
    for name, value in raw.items():
        kwargs[name] = _coerce(name, value)
    try:
        return ExperimentConfig(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
