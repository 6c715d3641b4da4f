"""Objective configuration: the NITP switches and ablation axes."""

from enum import Enum
from typing import Optional

from pydantic import Field
from .base_config import BaseConfig


class TemporalShift(str, Enum):
    """Which position's shallow state a prediction position is paired with."""
    NEXT_TOKEN = "next_token"
    CURRENT_STEP = "current_step"


class LossFamily(str, Enum):
    """Auxiliary loss applied to (prediction, implicit target) pairs."""
    COSINE = "cosine"
    MSE = "mse"
    SMOOTH_L1 = "smooth_l1"
    KL = "kl"
    GENERIC_COSINE_REG = "generic_cosine_reg"


def default_target_layer(num_layers: int) -> int:
    """Shallow target at about 20% of the depth, at least layer 1."""
    return max(1, round(0.2 * num_layers))


class ObjectiveConfig(BaseConfig):
    """Configuration of the combined NTP + NITP objective.

    ``enabled = False`` is the NTP-only build: no projection head is created
    and no implicit tokens are extracted. ``nitp_lambda`` is spelled
    ``lambda`` in configuration files.
    """
    enabled: bool = Field(default=True, description="Build the NITP machinery at all")
    nitp_lambda: float = Field(default=1.0, ge=0.0, alias="lambda", description="Weight of the NITP term")
    target_layer: Optional[int] = Field(
        default=None,
        ge=1,
        description="Layer whose post-block state is the implicit token (default round(0.2*L))",
    )
    temporal_shift: TemporalShift = Field(default=TemporalShift.NEXT_TOKEN)
    loss_family: LossFamily = Field(default=LossFamily.COSINE)
    use_projector: bool = Field(default=True, description="Apply the SwiGLU projection head before the loss")
    projector_hidden_mult: int = Field(default=4, ge=1, description="Projector hidden width as a multiple of d")
    stop_gradient_targets: bool = Field(default=True, description="Freeze implicit targets")
    nitp_start_step: int = Field(default=0, ge=0, description="First step at which the NITP term is added")
    kl_temperature: float = Field(default=1.0, gt=0.0)
    smooth_l1_beta: float = Field(default=1.0, gt=0.0)
    regularizer_pairs: int = Field(
        default=64, ge=1, description="Sampled position pairs for the generic cosine regularizer"
    )

    def resolve_target_layer(self, num_layers: int) -> int:
        """Return the configured target layer, or the depth-based default."""
        layer = self.target_layer if self.target_layer is not None else default_target_layer(num_layers)
        if not 1 <= layer <= num_layers:
            raise ValueError(f"target_layer {layer} outside [1, {num_layers}]")
        return layer

    def __str__(self) -> str:
        """Return human-readable string representation."""
        if not self.enabled:
            return "ObjectiveConfig(NTP only)"
        return (
            f"ObjectiveConfig(lambda={self.nitp_lambda}, target_layer={self.target_layer}, "
            f"shift={self.temporal_shift.value}, loss={self.loss_family.value}, "
            f"projector={self.use_projector}, sg={self.stop_gradient_targets}, "
            f"start={self.nitp_start_step})"
        )
