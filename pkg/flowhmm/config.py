"""
Configuration management for flowhmm.
"""

import logging
import os
from pathlib import Path
from typing import Any, Callable, Dict, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

ModelKind = Literal["gmm", "nvp", "glow"]

# Learning rates and mixture sizes per model kind
DEFAULT_LEARNING_RATES: Dict[str, float] = {"gmm": 0.0, "nvp": 4e-3, "glow": 1e-4}
DEFAULT_NUM_MIX: Dict[str, int] = {"gmm": 3, "nvp": 3, "glow": 1}


class MfccConfig(BaseModel):
    """MFCC front-end settings."""

    model_config = ConfigDict(extra="forbid")

    num_ceps: int = Field(default=13, ge=1)
    window_ms: float = Field(default=25.0, gt=0)
    shift_ms: float = Field(default=10.0, gt=0)
    num_mel_filters: int = Field(default=26, ge=1)
    fft_size: int = Field(default=512, ge=16)
    preemphasis: float = Field(default=0.97, ge=0.0, lt=1.0)
    low_freq: float = Field(default=0.0, ge=0.0)
    high_freq: Optional[float] = None  # Nyquist when unset
    log_floor: float = Field(default=1e-10, gt=0.0)

    @model_validator(mode="after")
    def validate_frames(self) -> "MfccConfig":
        """Validate window/shift ordering and cepstrum count."""
        if not self.window_ms > self.shift_ms:
            raise ValueError(
                f"window_ms must exceed shift_ms, got {self.window_ms} <= {self.shift_ms}"
            )
        if self.num_ceps > self.num_mel_filters:
            raise ValueError(
                f"num_ceps ({self.num_ceps}) cannot exceed num_mel_filters "
                f"({self.num_mel_filters})"
            )
        return self

    def window_samples(self, sample_rate: int) -> int:
        """Window length in samples."""
        return int(round(sample_rate * self.window_ms / 1000.0))

    def shift_samples(self, sample_rate: int) -> int:
        """Frame shift in samples."""
        return int(round(sample_rate * self.shift_ms / 1000.0))


class FlowConfig(BaseModel):
    """Flow architecture settings shared by RealNVP and Glow emissions."""

    model_config = ConfigDict(extra="forbid")

    coupling_layers: int = Field(default=4, ge=2)
    flow_steps: int = Field(default=12, ge=1)
    hidden_width: Optional[int] = Field(default=None, ge=1)  # 2 * D when unset
    init_jitter: float = Field(default=1e-2, ge=0.0)
    activation_norm: bool = Field(default=True)
    actnorm_init: Literal["first_batch", "full"] = Field(default="first_batch")

    @field_validator("coupling_layers")
    @classmethod
    def validate_coupling_layers(cls, v: int) -> int:
        """Coupling layers come in flow blocks of two."""
        if v % 2:
            raise ValueError(f"coupling_layers must be even (whole flow blocks), got {v}")
        return v

    def hidden_for(self, dim: int) -> int:
        """Hidden width for a flow over ``dim`` features."""
        return self.hidden_width if self.hidden_width is not None else 2 * dim


class TrainConfig(BaseModel):
    """Hybrid EM / minibatch gradient training settings."""

    model_config = ConfigDict(extra="forbid")

    learning_rate: Optional[float] = Field(default=None, gt=0.0)
    batch_size: int = Field(default=8, ge=1)
    max_inner_iters: int = Field(default=50, ge=0)
    convergence_threshold: float = Field(default=1e-4, gt=0.0, lt=1.0)
    convergence_streak: int = Field(default=3, ge=1)
    outer_iters: int = Field(default=20, ge=0)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    lr_decay_factor: float = Field(default=0.5, gt=0.0, le=1.0)
    lr_decay_every: int = Field(default=10, ge=1)
    stop_on_convergence: bool = Field(default=True)
    det_warning_threshold: float = Field(default=1e-6, gt=0.0)
    seed: int = Field(default=0, ge=0)

    def resolved_learning_rate(self, kind: str) -> float:
        """Learning rate in effect for ``kind`` when none is configured."""
        if self.learning_rate is not None:
            return self.learning_rate
        return DEFAULT_LEARNING_RATES[kind]


class ModelConfig(BaseModel):
    """Topology of one class model."""

    model_config = ConfigDict(extra="forbid")

    kind: ModelKind = Field(default="nvp")
    num_states: int = Field(default=3, ge=1)
    num_mix: Optional[int] = Field(default=None, ge=1)

    def resolved_num_mix(self) -> int:
        """Mixture size in effect for this kind."""
        if self.num_mix is not None:
            return self.num_mix
        return DEFAULT_NUM_MIX[self.kind]


class Config(BaseModel):
    """Top-level configuration."""

    model_config = ConfigDict(extra="forbid")

    log_level: str = Field(default="INFO")
    log_file: Optional[str] = None
    jobs: int = Field(default=1, ge=1, le=64)
    seed: int = Field(default=0, ge=0)

    mfcc: MfccConfig = Field(default_factory=MfccConfig)
    flow: FlowConfig = Field(default_factory=FlowConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"Log level must be one of: {valid_levels}")
        return v.upper()


def load_config(config_path: Optional[str] = None) -> Config:
    """
    Load configuration from file and environment variables.

    Args:
        config_path: Path to a YAML configuration file. If not provided, ``./flowhmm.yaml``
                     and ``~/.config/flowhmm/config.yaml`` are searched.

    Returns:
        Config object
    """
    config_data: Dict[str, Any] = {}

    if not config_path:
        config_path = _find_default_config()

    if config_path:
        config_file = Path(config_path)
        if config_file.exists():
            with open(config_file, "r", encoding="utf-8") as f:
                config_data = yaml.safe_load(f) or {}
        else:
            raise FileNotFoundError(f"Configuration file not found: {config_path}")

    for key, value in _get_env_overrides().items():
        section, _, field = key.partition(".")
        if field:
            config_data.setdefault(section, {})[field] = value
        else:
            config_data[section] = value

    return Config(**config_data)


def _find_default_config() -> Optional[str]:
    """
    Search for a configuration file in default locations.

    Returns:
        Path to config file if found, None otherwise
    """
    search_paths = [
        Path.cwd() / "flowhmm.yaml",
        Path.home() / ".config" / "flowhmm" / "config.yaml",
    ]

    for path in search_paths:
        if path.exists() and path.is_file():
            logging.info(f"Found configuration file at: {path}")
            return str(path)

    logging.debug("No configuration file found in default locations, using defaults")
    return None


def _get_env_overrides() -> dict:
    """Get configuration overrides from environment variables."""
    env_mapping: Dict[str, tuple[str, Callable[[str], Any]]] = {
        "FLOWHMM_LOG_LEVEL": ("log_level", str),
        "FLOWHMM_LOG_FILE": ("log_file", str),
        "FLOWHMM_JOBS": ("jobs", int),
        "FLOWHMM_SEED": ("seed", int),
        "FLOWHMM_MODEL_KIND": ("model.kind", str),
        "FLOWHMM_NUM_STATES": ("model.num_states", int),
        "FLOWHMM_NUM_MIX": ("model.num_mix", int),
        "FLOWHMM_LEARNING_RATE": ("train.learning_rate", float),
        "FLOWHMM_BATCH_SIZE": ("train.batch_size", int),
        "FLOWHMM_OUTER_ITERS": ("train.outer_iters", int),
        "FLOWHMM_MAX_INNER_ITERS": ("train.max_inner_iters", int),
    }

    overrides = {}
    for env_var, (config_key, converter) in env_mapping.items():
        value = os.getenv(env_var)
        if value is not None:
            try:
                overrides[config_key] = converter(value)
            except (ValueError, TypeError) as e:
                logging.warning(f"Invalid value for {env_var}: {value} - {e}")

    return overrides


def create_example_config(output_path: str = "config.example.yaml") -> None:
    """Create an example configuration file."""
    example_config = {
        "log_level": "INFO",
        "jobs": 4,
        "seed": 0,
        "model": {"kind": "nvp", "num_states": 3, "num_mix": 3},
        "flow": {"coupling_layers": 4, "flow_steps": 12, "init_jitter": 0.01},
        "train": {
            "batch_size": 8,
            "max_inner_iters": 50,
            "convergence_threshold": 0.0001,
            "convergence_streak": 3,
            "outer_iters": 20,
            "lr_decay_factor": 0.5,
            "lr_decay_every": 10,
        },
        "mfcc": {"num_ceps": 13, "window_ms": 25.0, "shift_ms": 10.0, "num_mel_filters": 26},
    }

    with open(output_path, "w", encoding="utf-8") as f:
        yaml.dump(example_config, f, default_flow_style=False, sort_keys=False)
