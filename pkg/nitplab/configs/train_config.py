"""Optimization and run-cadence configuration."""

from pydantic import Field, model_validator
from .base_config import BaseConfig


class TrainConfig(BaseConfig):
    """AdamW, WSD schedule, batching and logging cadence."""
    peak_lr: float = Field(default=3e-3, gt=0.0, description="Learning rate after warmup")
    warmup_steps: int = Field(default=100, ge=0)
    decay_ratio: float = Field(default=0.2, gt=0.0, lt=1.0, description="Fraction of steps spent decaying")
    total_steps: int = Field(default=1000, ge=1)
    adam_beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(default=0.95, ge=0.0, lt=1.0)
    adam_eps: float = Field(default=1e-8, gt=0.0)
    weight_decay: float = Field(default=0.1, ge=0.0)
    grad_clip: float = Field(default=1.0, gt=0.0, description="Global gradient norm ceiling")
    batch_size: int = Field(default=8, ge=1)
    seq_len: int = Field(default=64, ge=2)
    seed: int = Field(default=0, ge=0, description="Data order and sampling seed")
    snapshot_every: int = Field(default=50, ge=1, description="Steps between geometry snapshots")
    log_every: int = Field(default=1, ge=1)
    checkpoint_every: int = Field(default=500, ge=1)

    @model_validator(mode="after")
    def check_warmup(self) -> "TrainConfig":
        if self.warmup_steps >= self.total_steps:
            raise ValueError(
                f"warmup_steps ({self.warmup_steps}) must be below total_steps ({self.total_steps})"
            )
        return self

    def __str__(self) -> str:
        """Return human-readable string representation."""
        return (
            f"TrainConfig(lr={self.peak_lr:g}, steps={self.total_steps}, warmup={self.warmup_steps}, "
            f"decay={self.decay_ratio}, batch={self.batch_size}x{self.seq_len})"
        )
