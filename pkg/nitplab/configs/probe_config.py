"""Geometry probe configuration."""

from pydantic import Field
from .base_config import BaseConfig


class ProbeConfig(BaseConfig):
    """Sampling parameters for geometry snapshots."""
    num_pairs: int = Field(default=1024, ge=1, description="Sampled row pairs for the average cosine")
    seed: int = Field(default=0, ge=0, description="Base seed of the pair sampler")
