"""Configuration package for nitplab."""

from .base_config import BaseConfig
from .model_config import FfnKind, ModelConfig
from .objective_config import LossFamily, ObjectiveConfig, TemporalShift, default_target_layer
from .train_config import TrainConfig
from .probe_config import ProbeConfig
from .arch_config import ArchSpec, PRESETS, get_preset, load_arch_spec
from .config_manager import ConfigManager, RunConfig

__all__ = [
    'BaseConfig',
    'FfnKind',
    'ModelConfig',
    'LossFamily',
    'ObjectiveConfig',
    'TemporalShift',
    'default_target_layer',
    'TrainConfig',
    'ProbeConfig',
    'ArchSpec',
    'PRESETS',
    'get_preset',
    'load_arch_spec',
    'ConfigManager',
    'RunConfig',
]
