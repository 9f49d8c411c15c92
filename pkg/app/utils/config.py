import os
import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from app.utils.errors import ConfigurationError

# Load environment variables
load_dotenv()

logger = logging.getLogger(__name__)

OUTPUT_ROOT = os.getenv("CMNET_OUTPUT_ROOT", "runs")
DEVICE = os.getenv("CMNET_DEVICE", "cpu")
WEIGHTS_PATH = os.getenv("CMNET_WEIGHTS")
LOG_LEVEL = os.getenv("CMNET_LOG_LEVEL", "INFO")

SharingPolicy = Literal["all_shared", "halves_shared", "independent"]
SHARING_POLICIES = ("all_shared", "halves_shared", "independent")


class DivisionSpec(BaseModel):
    """How SFIRM partitions the refined map before localized attention."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    spatial_parts: int = 4
    channel_groups: int = Field(4, ge=1)
    allow_uneven_channels: bool = False
    share_tile_attention: bool = False

    @field_validator("spatial_parts")
    @classmethod
    def _supported_square(cls, value: int) -> int:
        if value not in (1, 4, 9):
            raise ValueError(f"spatial_parts must be one of 1, 4, 9 (got {value})")
        return value


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(7, ge=2)
    input_size: int = Field(224, ge=32)
    input_channels: int = 3
    sharing: SharingPolicy = "all_shared"
    spatial_parts: int = 4
    channel_groups: int = Field(4, ge=1)
    allow_uneven_channels: bool = False
    share_tile_attention: bool = False
    alpha: float = Field(0.9, ge=0.0, le=1.0)
    mirror_right: bool = False
    use_cmem: bool = True
    use_bn2: bool = True
    use_attention: bool = True
    use_hfaom: bool = True
    sigmoid_gates: bool = True
    # sequential CBAM on the whole map, no division or reweighting
    plain_cbam: bool = False
    ablation_row: Optional[str] = None

    @field_validator("spatial_parts")
    @classmethod
    def _supported_square(cls, value: int) -> int:
        if value not in (1, 4, 9):
            raise ValueError(f"spatial_parts must be one of 1, 4, 9 (got {value})")
        return value

    @model_validator(mode="after")
    def _hfaom_needs_halves(self) -> "ModelConfig":
        if self.use_hfaom and not self.use_cmem:
            raise ValueError("use_hfaom requires use_cmem: the symmetry loss reads UB/LB features")
        if self.plain_cbam and not (self.use_attention and self.spatial_parts == 1 and self.channel_groups == 1):
            raise ValueError("plain_cbam requires use_attention with spatial_parts=1 and channel_groups=1")
        return self

    @property
    def division(self) -> DivisionSpec:
        return DivisionSpec(
            spatial_parts=self.spatial_parts,
            channel_groups=self.channel_groups,
            allow_uneven_channels=self.allow_uneven_channels,
            share_tile_attention=self.share_tile_attention,
        )


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    # optimizer and schedule tags are checked by the engine so that
    # an unknown tag surfaces as a ConfigurationError at build time
    optimizer: str = "sgd_momentum"
    lr: float = Field(0.01, gt=0.0)
    momentum: float = Field(0.9, ge=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    schedule: str = "step"
    step_factor: float = Field(0.1, gt=0.0)
    step_every: int = Field(15, ge=1)
    halve_every: int = Field(50, ge=1)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(40, ge=1)
    seed: int = 0
    num_workers: int = Field(0, ge=0)
    amp: bool = False


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    root: Optional[str] = None
    val_root: Optional[str] = None
    test_root: Optional[str] = None
    synthetic: bool = True
    layout: Literal["symmetric", "quadrant"] = "symmetric"
    n_per_class: int = Field(32, ge=1)
    val_n_per_class: int = Field(8, ge=1)
    asymmetry: float = Field(0.0, ge=0.0, le=1.0)
    sampling: Literal["none", "balance"] = "none"
    grayscale_expand: bool = True
    augment: bool = False
    mean: Tuple[float, float, float] = (0.485, 0.456, 0.406)
    std: Tuple[float, float, float] = (0.229, 0.224, 0.225)


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(32, ge=1)
    profile_sizes: List[int] = [128, 224, 512]
    latency_batch: int = Field(32, ge=1)
    latency_runs: int = Field(5, ge=0)
    latency_warmup: int = Field(2, ge=0)
    ablation_epochs: int = Field(1, ge=1)
    alpha_grid: List[float] = [round(0.1 * i, 1) for i in range(11)]
    label_map: Dict[str, int] = {}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    evaluation: EvalConfig = EvalConfig()


def _apply_override(raw: Dict, override: str) -> None:
    """
    Apply one dotted ``section.key=value`` override to the raw document.

    Args:
        raw (Dict): Parsed config document, modified in place
        override (str): Override expression

    Raises:
        ConfigurationError: If the expression is malformed
    """
    if "=" not in override:
        raise ConfigurationError(f"Override '{override}' is not of the form section.key=value")
    key, value = override.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigurationError(f"Override key '{key}' must be section.key")
    section, name = parts
    try:
        parsed = yaml.safe_load(value) if value.strip() else None
    except yaml.YAMLError as e:
        raise ConfigurationError(f"Cannot parse override value for '{key}': {str(e)}")
    target = raw.setdefault(section, {})
    if not isinstance(target, dict):
        raise ConfigurationError(f"Config section '{section}' is not a mapping")
    target[name] = parsed


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    """
    Read a run configuration and apply command-line overrides.

    Args:
        path (Optional[str]): YAML document with model/train/data/evaluation sections
        overrides (Sequence[str]): Dotted key=value overrides, applied after the file

    Returns:
        RunConfig: Validated configuration

    Raises:
        ConfigurationError: On unreadable files, YAML syntax errors or invalid values
    """
    raw: Dict = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                raw = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
            raise ConfigurationError(f"Failed to parse config {path}{where}: {getattr(e, 'problem', None) or str(e)}")
        except OSError as e:
            raise ConfigurationError(f"Cannot read config {path}: {str(e)}")
        if not isinstance(raw, dict):
            raise ConfigurationError(f"Config {path} must be a mapping of sections")

    for override in overrides:
        _apply_override(raw, override)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigurationError(f"Invalid configuration: {problems}")


def dump_config(config: RunConfig, path: Path) -> None:
    """Write the effective configuration as sorted YAML."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=True)
    logger.info(f"Effective config written to {path}")
