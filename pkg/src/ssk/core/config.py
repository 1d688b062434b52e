"""Configuration management for ssk."""

import dataclasses
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from ssk.agg.head import HeadConfig
from ssk.agg.roi_pool import PoolConfig
from ssk.agg.semantic import VoteScheme
from ssk.bev.anchors import AnchorConfig
from ssk.bev.encoder2d import DEFAULT_WIDTHS
from ssk.geom.voxel_spec import VoxelSpec
from ssk.loss.objectives import LossConfig
from ssk.pcio.augment import AugmentConfig
from ssk.sparse3d.encoder import EncoderConfig
from ssk.voxel.msv import DEFAULT_CHANNELS, DEFAULT_RATES, topk_count

CONFIG_FILE = "ssk.cfg"
CHECKPOINT_FILE = "model.ckpt"
LOSS_CSV = "loss.csv"
REPORT_FILE = "report.json"
GT_DATABASE_DIR = "gt_database"

# Desk-scale crop; grids stay small enough for CPU training
DESK_SPEC = VoxelSpec((0.0, -9.6, -3.0), (19.2, 9.6, 1.0), (0.1, 0.1, 0.1))
FULL_SPEC = VoxelSpec((0.0, -40.0, -3.0), (70.4, 40.0, 1.0), (0.1, 0.1, 0.1))

LOG_LEVEL = os.getenv("SSK_LOG", "INFO").upper()
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def setup_logging() -> logging.Logger:
    """Set up logging configuration for ssk."""
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT)
    return logging.getLogger("ssk")


class ConfigError(ValueError):
    """Invalid configuration file or value; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class MsvConfig:
    channels: tuple[tuple[int, int, int], ...] = DEFAULT_CHANNELS
    rates: tuple[float, ...] = DEFAULT_RATES
    vote: bool = True
    centerness: bool = True

    def __post_init__(self):
        if len(self.rates) != len(self.channels) - 1:
            raise ValueError(f"{len(self.channels)} levels need {len(self.channels) - 1} sampling rates")
        for rate in self.rates:
            topk_count(1, rate)


@dataclass(frozen=True)
class AggConfig:
    semantic_width: int = 32
    scheme: VoteScheme = VoteScheme.F_ONLY

    def __post_init__(self):
        if self.semantic_width < 1:
            raise ValueError(f"semantic_width must be positive, got {self.semantic_width}")
        object.__setattr__(self, "scheme", VoteScheme.parse(self.scheme))


@dataclass(frozen=True)
class DetectConfig:
    top_n_train: int = 128
    top_n_eval: int = 64
    nms_iou: float = 0.7
    final_nms_iou: float = 0.1
    score_threshold: float = 0.1

    def __post_init__(self):
        if self.top_n_train < 1 or self.top_n_eval < 1:
            raise ValueError(f"Proposal budgets must be >= 1, got {self.top_n_train}, {self.top_n_eval}")
        if not (0.0 <= self.nms_iou <= 1.0 and 0.0 <= self.final_nms_iou <= 1.0):
            raise ValueError(f"NMS thresholds must lie in [0, 1]: {self.nms_iou}, {self.final_nms_iou}")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    lr_max: float = 0.01
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    augment: bool = True
    gt_sampling: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.lr_max <= 0 or self.weight_decay < 0:
            raise ValueError(f"Invalid training schedule: {self}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError(f"Adam betas must lie in [0, 1): {self.beta1}, {self.beta2}")


@dataclass(frozen=True)
class PipelineConfig:
    """Every knob of the detector, its training and its decoding."""

    seed: int = 0
    voxel: VoxelSpec = DESK_SPEC
    msv: MsvConfig = field(default_factory=MsvConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    bev_widths: tuple[tuple[int, int, int], ...] = DEFAULT_WIDTHS
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    agg: AggConfig = field(default_factory=AggConfig)
    pool: PoolConfig = field(default_factory=PoolConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    detect: DetectConfig = field(default_factory=DetectConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def with_full_range(self) -> "PipelineConfig":
        return dataclasses.replace(self, voxel=FULL_SPEC)


def tiny_config(seed: int = 0) -> PipelineConfig:
    """A coarse, narrow configuration that runs a full forward pass in well under a second."""
    return PipelineConfig(
        seed=seed,
        voxel=VoxelSpec(DESK_SPEC.range_min, DESK_SPEC.range_max, (0.4, 0.4, 0.4)),
        msv=MsvConfig(channels=((10, 8, 8), (8, 8, 8), (8, 8, 8), (8, 8, 8))),
        bev_widths=((8, 8, 8), (8, 8, 8), (8, 8, 8), (8, 8, 8)),
        agg=AggConfig(semantic_width=8),
        pool=PoolConfig(grids=(2, 3), radii=(6.0, 3.0), width=4),
        head=HeadConfig(num_samples=16, hidden=16),
        detect=DetectConfig(top_n_train=16, top_n_eval=8),
        train=TrainConfig(epochs=2, lr_max=0.003),
    )


# ---------------------------------------------------------------------------
# Flat key = value text format
# ---------------------------------------------------------------------------


# Separators by nesting depth: innermost first
SEPARATORS = (",", ";", "|")


def _depth(value) -> int:
    depth = 0
    while isinstance(value, tuple):
        depth += 1
        value = value[0] if value else None
    return depth


def _format_scalar(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _format_value(value) -> str:
    depth = _depth(value)
    if depth == 0:
        return _format_scalar(value)
    if depth > len(SEPARATORS):
        raise ConfigError(f"cannot serialize {depth}-deep nesting")
    return f"{SEPARATORS[depth - 1]} ".join(_format_value(v) for v in value)


def _flatten(obj, prefix: str = "") -> list[tuple[str, object]]:
    items = []
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            items.extend(_flatten(value, f"{key}."))
        else:
            items.append((key, value))
    return items


def serialize_config(config: PipelineConfig) -> str:
    lines = [f"{key} = {_format_value(value)}" for key, value in _flatten(config)]
    return "\n".join(lines) + "\n"


def _parse_scalar(text: str, like, key: str):
    text = text.strip()
    try:
        if isinstance(like, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError(f"expected true or false, got '{text}'")
            return text.lower() == "true"
        if isinstance(like, VoteScheme):
            return VoteScheme.parse(text)
        if isinstance(like, Enum):
            return type(like)(text)
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        return text
    except ValueError as e:
        raise ConfigError(str(e), key) from e


def _parse_value(text: str, like, key: str):
    depth = _depth(like)
    if depth == 0:
        return _parse_scalar(text, like, key)
    inner = like[0] if like else 0.0
    if depth > len(SEPARATORS):
        raise ConfigError(f"cannot parse {depth}-deep nesting", key)
    parts = [part for part in text.split(SEPARATORS[depth - 1]) if part.strip()]
    return tuple(_parse_value(part, inner, key) for part in parts)


def _apply(obj, overrides: dict[str, str], prefix: str = ""):
    changes = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            nested = {k: v for k, v in overrides.items() if k.startswith(f"{key}.")}
            if nested:
                changes[f.name] = _apply(value, nested, f"{key}.")
        elif key in overrides:
            changes[f.name] = _parse_value(overrides[key], value, key)
    if not changes:
        return obj
    try:
        return dataclasses.replace(obj, **changes)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e), prefix.rstrip(".") or None) from e


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    """
    Parse ``key = value`` lines over ``base`` (the defaults when omitted).

    Blank lines and ``#`` comments are skipped.

    Raises:
        ConfigError: On malformed lines, unknown or repeated keys, or invalid values
    """
    base = base or PipelineConfig()
    known = {key for key, _ in _flatten(base)}
    overrides: dict[str, str] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number} is not 'key = value': {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            raise ConfigError("unknown key", key)
        if key in overrides:
            raise ConfigError("repeated key", key)
        overrides[key] = value
    return _apply(base, overrides)


def load_config(path: Path | str | None, full_range: bool = False) -> PipelineConfig:
    """Read a config file; ``None`` gives the defaults."""
    config = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"Config file not found: {path}")
        config = parse_config(path.read_text())
    return config.with_full_range() if full_range else config


def save_config(config: PipelineConfig, path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(serialize_config(config))
