"""
Configuration for iprompt-lab.

Provides ExperimentConfig and its nested blocks, loadable from environment
variables (prefix ``IPROMPT_``, nested with ``__``), from a sectioned
``key = value`` text file, or by explicit instantiation. Use get_settings()
for a cached default instance and load_config() for files.

Example file::

    [experiment]
    version = 1
    seed = 7
    name = iprompt-b0inc2

    [prompt]
    method = iprompt
    pool_size = 20

    [schedule]
    spec = B0-Inc2
"""

import configparser
import logging
import re
from functools import lru_cache
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from iprompt_lab.exceptions import ConfigError

logger = logging.getLogger(__name__)

CONFIG_VERSION = 1

Method = Literal["iprompt", "querykey_baseline", "attention_baseline", "finetune", "joint"]

_SECTION_RE = re.compile(r"^\s*\[([^\]]+)\]\s*$")
_KEY_RE = re.compile(r"^\s*([A-Za-z0-9_.-]+)\s*[=:]")


class EncoderConfig(BaseModel):
    """
    Shape of the miniature Vision Transformer.

    Defaults mirror a ViT applying prompts to its first five layers, at
    desk scale: 32x32 images, 8x8 patches (16 patches), d=64, 4 heads,
    6 layers.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    image_size: int = Field(32, ge=1)
    patch_size: int = Field(8, ge=1)
    channels: int = Field(3, ge=1)
    embed_dim: int = Field(64, ge=1)
    num_heads: int = Field(4, ge=1)
    num_layers: int = Field(6, ge=1)
    mlp_ratio: float = Field(4.0, gt=0)
    prompted_layers: tuple[int, ...] = (0, 1, 2, 3, 4)
    layernorm_eps: float = Field(1e-6, gt=0)

    @field_validator("prompted_layers", mode="before")
    @classmethod
    def split_layers(cls, v: Any) -> Any:
        """Accept ``"0,1,2"`` as well as sequences."""
        if isinstance(v, str):
            return tuple(int(part) for part in v.split(",") if part.strip())
        return v

    @field_validator("prompted_layers", mode="after")
    @classmethod
    def order_layers(cls, v: tuple[int, ...]) -> tuple[int, ...]:
        if len(set(v)) != len(v):
            raise ValueError("prompted_layers must not repeat")
        return tuple(sorted(v))

    @model_validator(mode="after")
    def check_geometry(self) -> "EncoderConfig":
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if any(not 0 <= layer < self.num_layers for layer in self.prompted_layers):
            raise ValueError("prompted_layers must lie in [0, num_layers)")
        return self

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size * self.patch_size


class PromptConfig(BaseModel):
    """
    Prompt pool and method selection.

    ``offset_mode`` picks where composed prompts enter attention: ``split``
    adds P_k/P_v to projected keys/values, ``input`` adds the summed offset
    to the layer input before LayerNorm.
    """

    model_config = ConfigDict(extra="forbid")

    method: Method = "iprompt"
    pool_size: int = Field(20, ge=0)
    prompt_length: int = Field(2, ge=1)
    shared_pool: bool = False
    offset_mode: Literal["split", "input"] = "split"
    importance_layer: Literal["last", "first"] = "last"
    use_importance: bool = True
    baseline_insertion: Literal["prefix", "prompt"] = "prefix"


class ScheduleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    spec: str = "B0-Inc2"
    seed: int | None = None


class TrainingConfig(BaseModel):
    """Optimisation settings (Adam + cosine schedule)."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(6, ge=1)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, gt=0)
    pretrain_epochs: int = Field(10, ge=1)
    pretrain_lr: float = Field(2e-3, gt=0)
    eval_batch_size: int = Field(64, ge=1)
    online: bool = False
    eval_interval: float = Field(0.1, gt=0, le=1)


class DataConfig(BaseModel):
    """Synthetic dataset recipe; image geometry comes from the encoder block."""

    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(16, ge=2)
    pretrain_classes: int = Field(8, ge=1)
    train_per_class: int = Field(40, ge=1)
    test_per_class: int = Field(20, ge=1)
    noise_sigma: float = Field(12.0, ge=0)

    @model_validator(mode="after")
    def check_split(self) -> "DataConfig":
        if self.pretrain_classes >= self.num_classes:
            raise ValueError("pretrain_classes must leave at least one continual class")
        return self

    @property
    def continual_classes(self) -> int:
        return self.num_classes - self.pretrain_classes


class PathsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dataset_dir: Path = Path("data")
    backbone: Path = Path("data/backbone.ipvt")
    report_dir: Path = Path("reports")


class ReportConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    record_timing: bool = False


class ExperimentConfig(BaseSettings):
    """
    Complete description of one continual-learning experiment.

    Can be configured via environment variables (prefixed with IPROMPT_,
    nested blocks joined with ``__``), via load_config(), or explicitly.

    Environment variables:
        IPROMPT_SEED                 - Master seed (default: 0)
        IPROMPT_PROMPT__METHOD       - iprompt | querykey_baseline | attention_baseline | finetune | joint
        IPROMPT_SCHEDULE__SPEC       - Scenario, e.g. B0-Inc2, fluctuating, random-increase
        IPROMPT_TRAINING__EPOCHS     - Epochs per task (default: 6)
        IPROMPT_DEBUG                - Enable debug logging (default: False)

    Example::

        config = ExperimentConfig(seed=3, prompt={"method": "finetune"})
    """

    model_config = SettingsConfigDict(
        env_prefix="IPROMPT_",
        env_nested_delimiter="__",
        case_sensitive=False,
        extra="forbid",
    )

    version: int = CONFIG_VERSION
    seed: int = 0
    name: str = "experiment"
    debug: bool = False
    metrics_enabled: bool = False

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)

    @field_validator("version")
    @classmethod
    def check_version(cls, v: int) -> int:
        if v != CONFIG_VERSION:
            raise ValueError(f"unsupported config version {v} (expected {CONFIG_VERSION})")
        return v

    @property
    def schedule_seed(self) -> int:
        return self.seed if self.schedule.seed is None else self.schedule.seed


@lru_cache
def get_settings() -> ExperimentConfig:
    """Return a cached ExperimentConfig instance loaded from environment."""
    return ExperimentConfig()


def _line_index(text: str) -> dict[tuple[str, str], int]:
    index: dict[tuple[str, str], int] = {}
    section = ""
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.lstrip().startswith(("#", ";")):
            continue
        if match := _SECTION_RE.match(line):
            section = match.group(1).strip().lower()
            index.setdefault((section, ""), lineno)
        elif match := _KEY_RE.match(line):
            index.setdefault((section, match.group(1).lower()), lineno)
    return index


def _locate_error(loc: list[str], values: dict[str, Any]) -> tuple[str, str]:
    """``(section, key)`` of a validation error; key is empty for a whole section."""
    if loc and isinstance(values.get(loc[0]), dict):
        return loc[0], loc[1] if len(loc) >= 2 else ""
    return "experiment", loc[0] if loc else ""


def parse_config_text(text: str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """
    Parse the sectioned ``key = value`` format into an ExperimentConfig.

    Args:
        text: File contents.
        overrides: Top-level or nested values applied on top of the file
                   (e.g. ``{"seed": 4}`` from ``--seed``).

    Raises:
        ConfigError: On syntax errors, unknown sections/keys or invalid values,
                     with the offending key and line number.
    """
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}", line=getattr(exc, "lineno", None)) from exc

    lines = _line_index(text)
    values: dict[str, Any] = {}
    for section in parser.sections():
        entries = dict(parser.items(section))
        if section == "experiment":
            values.update(entries)
        else:
            values[section] = entries

    if "version" not in values:
        raise ConfigError("missing [experiment] version", key="experiment.version")
    for key, value in (overrides or {}).items():
        if isinstance(value, dict):
            values.setdefault(key, {}).update(value)
        else:
            values[key] = value

    try:
        config = ExperimentConfig(**values)
    except ValidationError as exc:
        first = exc.errors()[0]
        section, key = _locate_error([str(part) for part in first["loc"]], values)
        line = (lines.get((section, key)) if key else None) or lines.get((section, ""))
        qualified = f"{section}.{key}" if key else section
        details = "; ".join(f"{'.'.join(map(str, e['loc']))}: {e['msg']}" for e in exc.errors())
        if first["type"] == "extra_forbidden":
            unknown = f"unknown key {key!r} in [{section}]" if key else f"unknown section [{section}]"
            details = f"{unknown}; {details}"
        raise ConfigError(details, key=qualified, line=line) from exc

    logger.debug("Parsed config %s", config.name, extra={"seed": config.seed})
    return config


def load_config(path: Path | str, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """
    Load an experiment config file.

    Raises:
        ConfigError: If the file is missing or invalid.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    config = parse_config_text(text, overrides)
    logger.info("Loaded config %s from %s", config.name, path)
    return config
