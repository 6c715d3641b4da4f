"""
Per-token training-FLOPs accounting for NTP baselines and the NITP overhead.

Training costs about 6 FLOPs per parameter per token (forward plus
backward). Per layer, grouped-query attention holds ≈3d² parameters (18d²
FLOPs) and a MoE FFN with k activated SwiGLU experts holds 3·k·d·d_e
(18·k·d·d_e FLOPs); a dense FFN of width d_ffn counts as k = 1, d_e = d_ffn.
The unembedding costs 6·V·d and the input embedding is a lookup (0).

The NITP head adds a 12d² parameter SwiGLU projector (72d²) and a cosine
similarity (18d). Integers throughout, so every total is exact.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Optional, Tuple

from .configs.arch_config import ArchSpec
from .configs.model_config import FfnKind

logger = logging.getLogger(__name__)

TRAIN_MULTIPLIER = 6


@dataclass(frozen=True)
class FlopsBreakdown:
    """Per-token training FLOPs of one architecture."""
    attention_flops: int
    ffn_flops: int
    num_layers: int
    unembedding_flops: int
    nitp_projection_flops: int
    nitp_cosine_flops: int
    inference_overhead: int = 0

    @property
    def backbone_flops(self) -> int:
        return self.num_layers * (self.attention_flops + self.ffn_flops)

    @property
    def baseline_total(self) -> int:
        return self.backbone_flops + self.unembedding_flops

    @property
    def nitp_overhead(self) -> int:
        return self.nitp_projection_flops + self.nitp_cosine_flops

    @property
    def overhead_ratio(self) -> float:
        if self.baseline_total == 0:
            raise ZeroDivisionError("Baseline FLOPs are zero")
        return self.nitp_overhead / self.baseline_total

    def to_dict(self, tokens: Optional[int] = None) -> Dict[str, float]:
        data = asdict(self)
        data.update(
            backbone_flops=self.backbone_flops,
            baseline_total=self.baseline_total,
            nitp_overhead=self.nitp_overhead,
            overhead_ratio=self.overhead_ratio,
        )
        if tokens is not None:
            data.update(
                tokens=tokens,
                run_baseline_flops=self.baseline_total * tokens,
                run_nitp_flops=(self.baseline_total + self.nitp_overhead) * tokens,
            )
        return data


def attention_flops(spec: ArchSpec) -> int:
    """18d² per layer."""
    return 3 * TRAIN_MULTIPLIER * spec.hidden_dim**2


def ffn_flops(spec: ArchSpec) -> int:
    """18·k·d·d_e per layer (dense: 18·d·d_ffn)."""
    if spec.ffn_kind == FfnKind.MOE:
        return 3 * TRAIN_MULTIPLIER * spec.activated_experts * spec.hidden_dim * spec.expert_ffn_dim
    return 3 * TRAIN_MULTIPLIER * spec.hidden_dim * spec.dense_ffn_dim


def unembedding_flops(spec: ArchSpec) -> int:
    return TRAIN_MULTIPLIER * spec.vocab_size * spec.hidden_dim


def ntp_train_flops(spec: ArchSpec) -> FlopsBreakdown:
    """Baseline accounting L·(18d² + 18kd·d_e) + 6Vd, with the NITP terms filled in."""
    projection, cosine = nitp_overhead_flops(spec)
    return FlopsBreakdown(
        attention_flops=attention_flops(spec),
        ffn_flops=ffn_flops(spec),
        num_layers=spec.num_layers,
        unembedding_flops=unembedding_flops(spec),
        nitp_projection_flops=projection,
        nitp_cosine_flops=cosine,
    )


def nitp_overhead_flops(spec: ArchSpec) -> Tuple[int, int]:
    """(72d², 18d): projector training cost and cosine cost."""
    d = spec.hidden_dim
    return TRAIN_MULTIPLIER * 12 * d * d, 3 * 6 * d


def overhead_ratio(spec: ArchSpec) -> float:
    """(72d² + 18d) / baseline total."""
    return ntp_train_flops(spec).overhead_ratio


def format_report(spec: ArchSpec, breakdown: FlopsBreakdown, tokens: Optional[int] = None) -> str:
    """Human-readable breakdown for the ``flops`` command."""
    lines = [
        f"{spec}",
        f"  attention / layer      {breakdown.attention_flops:>20,d}  ({breakdown.attention_flops:.3e})",
        f"  ffn / layer            {breakdown.ffn_flops:>20,d}  ({breakdown.ffn_flops:.3e})",
        f"  backbone (L={breakdown.num_layers:<3d})      {breakdown.backbone_flops:>20,d}  ({breakdown.backbone_flops:.3e})",
        f"  unembedding            {breakdown.unembedding_flops:>20,d}  ({breakdown.unembedding_flops:.3e})",
        f"  baseline total         {breakdown.baseline_total:>20,d}  ({breakdown.baseline_total:.3e})",
        f"  nitp projection        {breakdown.nitp_projection_flops:>20,d}  ({breakdown.nitp_projection_flops:.3e})",
        f"  nitp cosine            {breakdown.nitp_cosine_flops:>20,d}",
        f"  nitp overhead total    {breakdown.nitp_overhead:>20,d}  ({breakdown.nitp_overhead:.3e})",
        f"  overhead ratio         {breakdown.overhead_ratio:>20.4%}",
        f"  inference overhead     {breakdown.inference_overhead:>20,d}",
    ]
    if tokens is not None:
        lines += [
            f"  tokens                 {tokens:>20,d}",
            f"  run baseline FLOPs     {breakdown.baseline_total * tokens:.4e}",
            f"  run NITP FLOPs         {(breakdown.baseline_total + breakdown.nitp_overhead) * tokens:.4e}",
        ]
    return "\n".join(lines)
