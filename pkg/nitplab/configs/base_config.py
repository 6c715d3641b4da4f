"""Base configuration classes and utilities."""

from pathlib import Path
from typing import Any, Dict
from pydantic import BaseModel, ConfigDict
import yaml
import enum
import logging

logger = logging.getLogger(__name__)

# Helper to recursively convert Enums to their .value
def enum_to_value(obj):
    if isinstance(obj, enum.Enum):
        return obj.value
    if isinstance(obj, dict):
        return {k: enum_to_value(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [enum_to_value(i) for i in obj]
    return obj


def deep_merge(base: Dict[str, Any], updates: Dict[str, Any]) -> Dict[str, Any]:
    """Return ``base`` with ``updates`` merged in, descending into nested dicts."""
    merged = dict(base)
    for key, value in updates.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class BaseConfig(BaseModel):
    """Base configuration class with common functionality.

    Configs are immutable and fail closed: unknown keys are validation errors.
    """
    model_config = ConfigDict(frozen=True, extra="forbid", populate_by_name=True)

    @classmethod
    def from_yaml(cls, yaml_path: str | Path) -> "BaseConfig":
        """Load configuration from YAML file."""
        try:
            with open(yaml_path, 'r') as f:
                config_dict = yaml.safe_load(f)
            if config_dict is None:
                raise ValueError(f"YAML file {yaml_path} is empty or invalid.")
            return cls.model_validate(config_dict)
        except Exception as e:
            logger.error(f"Error loading configuration from {yaml_path}: {e}")
            raise

    def to_dict(self) -> Dict[str, Any]:
        """Plain dict in file spelling (aliases, enum values)."""
        return enum_to_value(self.model_dump(by_alias=True))

    def to_yaml(self, yaml_path: str | Path) -> None:
        """Save configuration to YAML file."""
        try:
            with open(yaml_path, 'w') as f:
                yaml.safe_dump(self.to_dict(), f, default_flow_style=False, sort_keys=False)
        except Exception as e:
            logger.error(f"Error saving configuration to {yaml_path}: {e}")
            raise

    def update(self, updates: Dict[str, Any]) -> "BaseConfig":
        """Create a new configuration with (possibly nested) updates applied.

        Keys use field names, e.g. ``{"objective": {"nitp_lambda": 0.0}}``.
        """
        current = enum_to_value(self.model_dump())
        return self.__class__.model_validate(deep_merge(current, updates))
