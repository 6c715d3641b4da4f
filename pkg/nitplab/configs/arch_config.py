"""Architecture descriptions for training-FLOPs accounting."""

from pathlib import Path
from typing import Dict, Optional

import yaml

from pydantic import Field, model_validator
from .base_config import BaseConfig
from .model_config import FfnKind, ModelConfig

# Vocabulary shared by every preset below.
PRESET_VOCAB = 152064


class ArchSpec(BaseConfig):
    """Per-token FLOPs view of a decoder-only model.

    For MoE models ``activated_experts`` counts every expert a token passes
    through, shared experts included (top-8 routing plus one shared expert
    gives k = 9).
    """
    hidden_dim: int = Field(ge=1, description="d")
    num_layers: int = Field(ge=0, description="L")
    vocab_size: int = Field(ge=1, description="V")
    ffn_kind: FfnKind = Field(default=FfnKind.MOE)
    activated_experts: int = Field(default=1, ge=1, description="k")
    expert_ffn_dim: Optional[int] = Field(default=None, ge=1, description="d_e")
    dense_ffn_dim: Optional[int] = Field(default=None, ge=1, description="Dense FFN width")

    @model_validator(mode="after")
    def check_ffn_width(self) -> "ArchSpec":
        if self.ffn_kind == FfnKind.MOE and self.expert_ffn_dim is None:
            raise ValueError("MoE architecture needs expert_ffn_dim")
        if self.ffn_kind == FfnKind.DENSE and self.dense_ffn_dim is None:
            raise ValueError("dense architecture needs dense_ffn_dim")
        return self

    @classmethod
    def from_model_config(cls, model: ModelConfig) -> "ArchSpec":
        """Derive the accounting view of a toy model configuration."""
        if model.ffn_kind == FfnKind.MOE:
            return cls(
                hidden_dim=model.hidden_dim,
                num_layers=model.num_layers,
                vocab_size=model.vocab_size,
                ffn_kind=FfnKind.MOE,
                activated_experts=model.experts_per_token,
                expert_ffn_dim=model.expert_ffn_dim,
            )
        return cls(
            hidden_dim=model.hidden_dim,
            num_layers=model.num_layers,
            vocab_size=model.vocab_size,
            ffn_kind=FfnKind.DENSE,
            dense_ffn_dim=model.dense_ffn_dim,
        )

    def __str__(self) -> str:
        """Return human-readable string representation."""
        if self.ffn_kind == FfnKind.MOE:
            ffn = f"k={self.activated_experts}, d_e={self.expert_ffn_dim}"
        else:
            ffn = f"dense_ffn={self.dense_ffn_dim}"
        return f"ArchSpec(d={self.hidden_dim}, L={self.num_layers}, V={self.vocab_size}, {ffn})"


def _moe(d: int, layers: int, k: int, d_e: int) -> ArchSpec:
    return ArchSpec(
        hidden_dim=d, num_layers=layers, vocab_size=PRESET_VOCAB,
        ffn_kind=FfnKind.MOE, activated_experts=k, expert_ffn_dim=d_e,
    )


def _dense(d: int, layers: int, ffn: int) -> ArchSpec:
    return ArchSpec(
        hidden_dim=d, num_layers=layers, vocab_size=PRESET_VOCAB,
        ffn_kind=FfnKind.DENSE, dense_ffn_dim=ffn,
    )


PRESETS: Dict[str, ArchSpec] = {
    "1.9b-moe": _moe(512, 16, 9, 496),
    "3b-moe": _moe(768, 17, 9, 544),
    "9b-moe": _moe(1280, 24, 9, 640),
    "45b-moe": _moe(3072, 24, 13, 1408),
    "0.5b-dense": _dense(896, 24, 4864),
    "2b-dense": _dense(1792, 28, 10752),
    "3b-dense": _dense(2560, 28, 10240),
}


def get_preset(name: str) -> ArchSpec:
    """Look up a built-in architecture by name."""
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"Unknown preset '{name}', choose from {sorted(PRESETS)}") from None


def load_arch_spec(path: str | Path) -> ArchSpec:
    """
    Read an architecture file.

    The file holds either an ``arch`` section with ArchSpec fields, or a run
    configuration whose ``model`` section is converted.
    """
    with open(path) as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path} does not contain a YAML mapping")
    if "arch" in data:
        return ArchSpec.model_validate(data["arch"])
    if "model" in data:
        return ArchSpec.from_model_config(ModelConfig.model_validate(data["model"]))
    raise ValueError(f"{path} has neither an 'arch' nor a 'model' section")
