"""Application configuration using Pydantic Settings and experiment config models"""
import json
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.common.errors import RestoredDepthError


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables"""

    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="RDEPTH_",
        case_sensitive=False,
    )

    # Application
    environment: str = Field(default="development")
    log_level: str = Field(default="INFO")
    log_json: bool = Field(default=False, description="Force JSON log lines")

    # Runtime
    torch_threads: int = Field(default=0, description="torch intra-op threads (0 = torch default)")
    default_output_dir: str = Field(default="runs", description="Parent dir for run outputs")

    @property
    def is_production(self) -> bool:
        """Check if running in production"""
        return self.environment.lower() == "production"

    @property
    def is_development(self) -> bool:
        """Check if running in development"""
        return self.environment.lower() == "development"


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance"""
    return Settings()


class ConfigError(RestoredDepthError):
    """Raised when an experiment config fails validation"""

    def __init__(self, key_path: str, message: str):
        super().__init__(f"{key_path}: {message}")
        self.key_path = key_path
        self.message = message


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Section):
    """Synthetic dataset generation and loading"""

    path: Optional[str] = Field(default=None, description="Dataset directory with manifest.json")
    seed: int = 0
    image_size: int = Field(default=128, gt=0)
    object_count: Tuple[int, int] = (0, 6)
    depth_min: float = Field(default=0.5, gt=0)
    depth_max: float = Field(default=80.0, gt=0)
    texture_noise: float = Field(default=0.05, ge=0)
    train_size: int = Field(default=2000, ge=0)
    val_size: int = Field(default=200, ge=0)
    test_size: int = Field(default=200, ge=0)
    keep_rate: float = Field(default=0.15, ge=0, le=1)
    bf: float = Field(default=64.0, ge=0, description="baseline x focal product in px*m")

    @model_validator(mode="after")
    def _check_ranges(self) -> "DataConfig":
        if self.image_size % 32 != 0:
            raise ValueError("image_size must be divisible by 32")
        if self.depth_min >= self.depth_max:
            raise ValueError("depth_min must be below depth_max")
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ValueError("object_count must be an increasing non-negative pair")
        return self


class ScheduleConfig(_Section):
    """Noise schedule; serialized as {"T": 6, "kind": "linear", "literal_eq9": false}"""

    T: int = Field(default=6, ge=1)
    kind: Literal["linear"] = "linear"
    literal_eq9: bool = False


class ModelConfig(_Section):
    """Depth pipeline architecture"""

    encoder_channels: List[int] = Field(default_factory=lambda: [32, 64, 128, 256])
    bins: int = Field(default=64, ge=2)
    depth_min: float = Field(default=0.5, gt=0)
    depth_max: float = Field(default=80.0, gt=0)
    decoder: Literal["inv", "conv", "tf"] = "inv"
    coupling_hidden: int = Field(default=64, ge=1)
    tail_width: int = Field(default=64, ge=1)
    trunk_width: int = Field(default=128, ge=1)
    time_embed_dim: int = Field(default=64, ge=2)
    residual_blocks: int = Field(default=4, ge=1)
    clip_weights: Optional[float] = Field(default=None, gt=0)

    @model_validator(mode="after")
    def _check_shapes(self) -> "ModelConfig":
        if len(self.encoder_channels) != 4:
            raise ValueError("encoder_channels must list four stages")
        if self.encoder_channels[3] % 4 != 0:
            raise ValueError("level-4 channels must be divisible by 4 for pixel shuffle")
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.depth_min >= self.depth_max:
            raise ValueError("depth_min must be below depth_max")
        return self

    @property
    def restored_channels(self) -> int:
        """Channels entering the decoder block: f3' plus pixel-shuffled f4'"""
        return self.encoder_channels[2] + self.encoder_channels[3] // 4


class DiffusionConfig(_Section):
    """Inference-time diffusion options"""

    steps: int = Field(default=6, ge=0)
    condition_mode: Literal["rebuilt", "fixed"] = "rebuilt"


class AVLFEConfig(_Section):
    """Auxiliary-view low-level feature enhancement"""

    mode: Literal["off", "compatible", "full"] = "off"
    points: int = Field(default=9, ge=1)


class OptimConfig(_Section):
    """Optimizer hyperparameters per training stage"""

    lr_pretrain: float = Field(default=1e-3, gt=0)
    lr_diffusion: float = Field(default=1e-4, gt=0)
    lr_avlfe: float = Field(default=1e-4, gt=0)
    epochs_pretrain: int = Field(default=10, ge=0)
    epochs_diffusion: int = Field(default=10, ge=0)
    epochs_avlfe: int = Field(default=5, ge=0)
    batch_size: int = Field(default=8, ge=1)
    betas: Tuple[float, float] = (0.9, 0.999)


class FeatOptConfig(_Section):
    """Per-image feature optimization diagnostics"""

    steps: int = Field(default=50, ge=0)
    lr: float = Field(default=1e-2, ge=0)
    proxy_steps: int = Field(default=500, ge=0)
    levels: List[int] = Field(default_factory=lambda: [1, 2, 3, 4])
    max_images: Optional[int] = Field(default=None, ge=1)


class EvalConfig(_Section):
    """Evaluation options"""

    buckets: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(0.0, 20.0), (20.0, 50.0), (50.0, 80.0)]
    )
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    max_images: Optional[int] = Field(default=None, ge=1)


class ExperimentConfig(_Section):
    """
    Complete description of a run

    Together with the seed it fully determines every artifact a run writes.
    """

    seed: int = 0
    stage: Literal["pretrain", "diffusion", "avlfe"] = "pretrain"
    output_dir: Optional[str] = Field(
        default=None, description="Run directory; defaults under Settings.default_output_dir"
    )
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    avlfe: AVLFEConfig = Field(default_factory=AVLFEConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    featopt: FeatOptConfig = Field(default_factory=FeatOptConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    @model_validator(mode="after")
    def _check_steps(self) -> "ExperimentConfig":
        if self.diffusion.steps > self.schedule.T:
            raise ValueError("diffusion.steps cannot exceed schedule.T")
        return self


def _set_dotted(target: Dict[str, Any], dotted_key: str, value: Any) -> None:
    """Assign value at a dotted key path, creating intermediate sections"""
    parts = dotted_key.split(".")
    node = target
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(dotted_key, "cannot override inside a non-section value")
    node[parts[-1]] = value


def build_experiment_config(
    raw: Optional[Dict[str, Any]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Validate a raw config mapping with dotted-key overrides applied on top

    Args:
        raw: Parsed JSON config (may be None for all defaults)
        overrides: Mapping of dotted key path -> value (flags win over file keys)

    Returns:
        Validated experiment config

    Raises:
        ConfigError: With the dotted key path of the first offending key
    """
    data: Dict[str, Any] = json.loads(json.dumps(raw or {}))
    for key, value in (overrides or {}).items():
        if value is not None:
            _set_dotted(data, key, value)

    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        key_path = ".".join(str(part) for part in first["loc"]) or "<root>"
        raise ConfigError(key_path, first["msg"]) from e


def load_experiment_config(
    path: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> ExperimentConfig:
    """
    Load an experiment config from a JSON file

    Args:
        path: JSON file path (None uses defaults)
        overrides: Dotted-key overrides from command-line flags

    Returns:
        Validated experiment config
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON in {path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError("<root>", "config file must hold a JSON object")
    return build_experiment_config(raw, overrides)
