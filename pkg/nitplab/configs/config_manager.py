"""Configuration manager for nitplab runs."""

from pathlib import Path
from typing import Dict, Any, Optional
from pydantic import Field, model_validator
import logging
from .base_config import BaseConfig
from .model_config import ModelConfig
from .objective_config import ObjectiveConfig
from .train_config import TrainConfig
from .probe_config import ProbeConfig

logger = logging.getLogger(__name__)

# Byte-level tokenizer alphabet.
BYTE_VOCAB = 256

# Configurations installed with the package.
PACKAGE_CONFIG_DIR = Path(__file__).resolve().parent


class RunConfig(BaseConfig):
    """Run configuration combining model, objective, training and probe sections."""
    version: str = Field(
        default="1.0",
        pattern="^\\d+\\.\\d+$",
        description="Configuration version"
    )
    model: ModelConfig = Field(default_factory=ModelConfig)
    objective: ObjectiveConfig = Field(default_factory=ObjectiveConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    probe: ProbeConfig = Field(default_factory=ProbeConfig)
    corpus_path: Optional[str] = Field(default=None, description="Text file or directory of files")
    output_dir: str = Field(default="runs/default", description="Directory for logs and checkpoints")

    @model_validator(mode="after")
    def check_cross_fields(self) -> "RunConfig":
        target = self.objective.target_layer
        if target is not None and target > self.model.num_layers:
            raise ValueError(
                f"objective.target_layer ({target}) exceeds model.num_layers ({self.model.num_layers})"
            )
        if self.train.seq_len > self.model.max_seq_len:
            raise ValueError(
                f"train.seq_len ({self.train.seq_len}) exceeds model.max_seq_len ({self.model.max_seq_len})"
            )
        if self.model.vocab_size < BYTE_VOCAB:
            raise ValueError(
                f"model.vocab_size ({self.model.vocab_size}) cannot hold the {BYTE_VOCAB} byte ids"
            )
        return self

    @property
    def target_layer(self) -> int:
        """Resolved implicit-token source layer."""
        return self.objective.resolve_target_layer(self.model.num_layers)


class ConfigManager:
    """Manages loading, saving, and updating run configurations."""

    def __init__(self, config_dir: Optional[str | Path] = None):
        """Initialize configuration manager.

        Args:
            config_dir: Directory containing configuration files.
                       If None, uses the 'configs' directory in the working directory.
        """
        self.config_dir = Path(config_dir) if config_dir else Path("configs")
        self.current_config: Optional[RunConfig] = None

    def _resolve(self, config_name: str | Path) -> Path:
        path = Path(config_name)
        if path.is_absolute() or path.exists():
            return path
        local = self.config_dir / path
        if not local.exists() and (PACKAGE_CONFIG_DIR / path).exists():
            return PACKAGE_CONFIG_DIR / path
        return local

    def load_config(self, config_name: str | Path = "default_config.yaml") -> RunConfig:
        """Load a run configuration.

        Args:
            config_name: File name inside ``config_dir`` or a path

        Returns:
            Loaded configuration

        Raises:
            FileNotFoundError: If configuration file doesn't exist
            pydantic.ValidationError: If configuration is invalid
        """
        config_path = self._resolve(config_name)
        if not config_path.exists():
            raise FileNotFoundError(f"Configuration file {config_path} not found")
        self.current_config = RunConfig.from_yaml(config_path)
        logger.info(f"Loaded configuration from {config_path}")
        return self.current_config

    def save_config(self, config_path: str | Path) -> Path:
        """Save current configuration to file.

        Raises:
            RuntimeError: If no configuration is loaded
        """
        if not self.current_config:
            raise RuntimeError("No configuration loaded")
        config_path = Path(config_path)
        config_path.parent.mkdir(parents=True, exist_ok=True)
        self.current_config.to_yaml(config_path)
        logger.info(f"Saved configuration to {config_path}")
        return config_path

    def update_config(self, updates: Dict[str, Any]) -> RunConfig:
        """Update current configuration with new (nested) values.

        Raises:
            RuntimeError: If no configuration is loaded
            pydantic.ValidationError: If updates are invalid
        """
        if not self.current_config:
            raise RuntimeError("No configuration loaded")
        try:
            self.current_config = self.current_config.update(updates)
            logger.info("Configuration updated successfully")
            return self.current_config
        except Exception as e:
            logger.error(f"Error updating configuration: {e}")
            raise

    def write_run_config(self, run: RunConfig) -> Path:
        """Write the resolved configuration next to a run's outputs."""
        out_dir = Path(run.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.yaml"
        run.to_yaml(path)
        logger.info(f"Wrote run configuration to {path}")
        return path
