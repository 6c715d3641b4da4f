"""Toy decoder-only transformer configuration."""

from enum import Enum

from pydantic import Field, model_validator
from .base_config import BaseConfig


class FfnKind(str, Enum):
    """Per-layer feed-forward block."""
    DENSE = "dense"
    MOE = "moe"


class ModelConfig(BaseConfig):
    """Architecture of the toy transformer.

    Attention is grouped-query: ``num_q_heads`` query heads share
    ``num_kv_heads`` key/value heads, and ``num_q_heads * head_dim`` must equal
    ``hidden_dim``.
    """
    vocab_size: int = Field(default=256, ge=2, description="Vocabulary size V")
    hidden_dim: int = Field(default=64, ge=1, description="Hidden width d")
    num_layers: int = Field(default=2, ge=1, description="Number of transformer blocks L")
    num_q_heads: int = Field(default=4, ge=1, description="Query heads")
    num_kv_heads: int = Field(default=2, ge=1, description="Key/value heads")
    head_dim: int = Field(default=16, ge=1, description="Per-head width")
    ffn_kind: FfnKind = Field(default=FfnKind.DENSE, description="dense SwiGLU or top-k mixture of experts")
    dense_ffn_dim: int = Field(default=256, ge=1, description="Hidden width of the dense SwiGLU FFN")
    num_experts: int = Field(default=4, ge=1, description="Routed experts per MoE layer")
    experts_per_token: int = Field(default=2, ge=1, description="Experts activated per token (k)")
    expert_ffn_dim: int = Field(default=64, ge=1, description="Hidden width of one expert (d_e)")
    max_seq_len: int = Field(default=256, ge=1, description="Longest sequence the position table covers")
    seed: int = Field(default=0, ge=0, description="Parameter initialization seed")

    @model_validator(mode="after")
    def check_heads_and_routing(self) -> "ModelConfig":
        if self.num_q_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_q_heads ({self.num_q_heads}) must be divisible by num_kv_heads ({self.num_kv_heads})"
            )
        if self.num_q_heads * self.head_dim != self.hidden_dim:
            raise ValueError(
                f"num_q_heads * head_dim ({self.num_q_heads} * {self.head_dim}) must equal hidden_dim ({self.hidden_dim})"
            )
        if self.ffn_kind == FfnKind.MOE and self.experts_per_token > self.num_experts:
            raise ValueError(
                f"experts_per_token ({self.experts_per_token}) exceeds num_experts ({self.num_experts})"
            )
        return self

    def __str__(self) -> str:
        """Return human-readable string representation."""
        ffn = (
            f"moe(E={self.num_experts}, k={self.experts_per_token}, d_e={self.expert_ffn_dim})"
            if self.ffn_kind == FfnKind.MOE
            else f"dense({self.dense_ffn_dim})"
        )
        return (
            f"ModelConfig(V={self.vocab_size}, d={self.hidden_dim}, L={self.num_layers}, "
            f"heads={self.num_q_heads}/{self.num_kv_heads}x{self.head_dim}, ffn={ffn})"
        )
