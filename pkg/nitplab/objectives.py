"""
Training objectives: next-token cross-entropy and next-implicit-token prediction.

The NITP term asks the (projected) final hidden state at position t to point
in the direction of the shallow-layer state of token t+1, frozen with a
stop-gradient. Every ablation switch of ``ObjectiveConfig`` is honoured here:
target layer, temporal shift, loss family, projector, stop-gradient, start
step and the generic cosine regularizer.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .configs.objective_config import LossFamily, ObjectiveConfig, TemporalShift
from .geometry import sample_pairs
from .model import ActivationTrace, Model, SwiGLUWeights, forward
from .tensor import (
    Tensor,
    add,
    cross_entropy,
    huber,
    log_softmax,
    mean,
    mul,
    row_sum,
    rowwise_cosine,
    scale,
    softmax,
    stop_gradient,
    sub,
    take_rows,
)

logger = logging.getLogger(__name__)

# Seed stream reserved for projector initialization.
PROJECTOR_STREAM = 7919


class ProjectionHead:
    """Trainable SwiGLU map d → mult·d → d, discarded after training."""

    def __init__(self, weights: SwiGLUWeights):
        self.weights = weights

    @classmethod
    def build(cls, hidden_dim: int, hidden_mult: int = 4, seed: int = 0) -> "ProjectionHead":
        # Own generator so that adding the head never shifts model initialization.
        rng = np.random.default_rng((seed, PROJECTOR_STREAM))
        width = hidden_mult * hidden_dim

        def matrix(rows, cols):
            return Tensor(rng.normal(0.0, 0.02, size=(rows, cols)), requires_grad=True)

        return cls(SwiGLUWeights(matrix(hidden_dim, width), matrix(hidden_dim, width), matrix(width, hidden_dim)))

    @property
    def params(self) -> Dict[str, Tensor]:
        return {
            "projector.w_gate": self.weights.w_gate,
            "projector.w_up": self.weights.w_up,
            "projector.w_down": self.weights.w_down,
        }

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def __call__(self, h: Tensor) -> Tensor:
        return projection_head(h, self)


def projection_head(h: Tensor, head: ProjectionHead) -> Tensor:
    """Apply the projector to T×d final hidden states."""
    return head.weights(h)


def ntp_loss(logits: Tensor, tokens) -> Tensor:
    """
    Next-token cross-entropy: logits at 0..T−2 against tokens 1..T−1.

    Raises:
        ValueError: If T < 2
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise ValueError(f"ntp_loss needs at least 2 tokens, got {tokens.size}")
    targets = np.append(tokens[1:], 0)
    valid = np.ones(tokens.size, dtype=bool)
    valid[-1] = False
    return cross_entropy(logits, targets, valid)


def prediction_positions(seq_len: int, shift: TemporalShift) -> np.ndarray:
    """Positions whose final state predicts an implicit token."""
    if shift == TemporalShift.NEXT_TOKEN:
        if seq_len < 2:
            raise ValueError(f"next_token pairing needs at least 2 positions, got {seq_len}")
        return np.arange(seq_len - 1)
    return np.arange(seq_len)


def extract_implicit_tokens(trace: ActivationTrace, cfg: ObjectiveConfig) -> Tensor:
    """
    Implicit targets from the target layer's post-block states.

    next_token pairs row t+1 with prediction position t (T−1 rows);
    current_step pairs row t with position t (T rows). Targets are wrapped in
    a stop-gradient unless ``stop_gradient_targets`` is off.

    Raises:
        ValueError: If the target layer is outside [1, L]
    """
    layer = cfg.resolve_target_layer(trace.num_layers)
    states = trace.layers[layer]
    seq_len = states.shape[0]
    positions = prediction_positions(seq_len, cfg.temporal_shift)
    rows = positions + 1 if cfg.temporal_shift == TemporalShift.NEXT_TOKEN else positions
    targets = take_rows(states, rows)
    return stop_gradient(targets) if cfg.stop_gradient_targets else targets


def nitp_loss(pred: Tensor, targets: Tensor, family: LossFamily, cfg: Optional[ObjectiveConfig] = None) -> Tensor:
    """
    Mean misalignment between predictions and implicit targets.

    cosine: 1 − cos; mse: ‖Δ‖²/d; smooth_l1: elementwise Huber;
    kl: KL(softmax(target/τ) ‖ softmax(pred/τ)) over the feature axis.

    Raises:
        DegenerateVectorError: On a zero-norm row under the cosine family
        ValueError: For the generic regularizer, which is not a paired loss
    """
    cfg = cfg or ObjectiveConfig()
    if pred.ndim != 2 or pred.shape != targets.shape:
        raise ValueError(f"nitp_loss: prediction {pred.shape} and target {targets.shape} must be equal N×d")
    family = LossFamily(family)
    if family == LossFamily.COSINE:
        return add(Tensor(1.0), scale(mean(rowwise_cosine(pred, targets)), -1.0))
    if family == LossFamily.MSE:
        diff = sub(pred, targets)
        return mean(mul(diff, diff))
    if family == LossFamily.SMOOTH_L1:
        return mean(huber(sub(pred, targets), cfg.smooth_l1_beta))
    if family == LossFamily.KL:
        inv_t = 1.0 / cfg.kl_temperature
        log_q = log_softmax(scale(targets, inv_t))
        q = softmax(scale(targets, inv_t))
        log_p = log_softmax(scale(pred, inv_t))
        return mean(row_sum(mul(q, sub(log_q, log_p))))
    raise ValueError(f"Loss family '{family.value}' is not a paired prediction loss")


def total_loss(ntp: Tensor, nitp: Optional[Tensor], lam: float, step: int, nitp_start_step: int) -> Tensor:
    """
    ntp + λ·nitp once ``step`` reaches the start step, ntp alone otherwise.

    The NTP tensor itself is returned when the NITP term is gated off or λ = 0.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if nitp is None or lam == 0 or step < nitp_start_step:
        return ntp
    return add(ntp, scale(nitp, lam))


def generic_cosine_regularizer(states: Tensor, num_pairs: int, rng: np.random.Generator) -> Tensor:
    """
    Mean cosine similarity over sampled distinct-position pairs of ``states``.

    Raises:
        ValueError: If fewer than 2 rows are given
    """
    if states.ndim != 2 or states.shape[0] < 2:
        raise ValueError(f"generic_cosine_regularizer needs at least 2 rows, got shape {states.shape}")
    first, second = sample_pairs(states.shape[0], num_pairs, rng)
    return mean(rowwise_cosine(take_rows(states, first), take_rows(states, second)))


@dataclass
class ObjectiveTerms:
    """All loss terms of one sequence."""
    ntp: Tensor
    nitp: Optional[Tensor]
    total: Tensor
    alignment: Optional[float]
    logits: Tensor
    trace: ActivationTrace
    targets: Optional[Tensor] = None


def regularizer_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Pair sampler of the generic regularizer for one sequence of one step."""
    return np.random.default_rng((seed, 1, step, index))


def evaluate_objective(
    model: Model,
    head: Optional[ProjectionHead],
    tokens,
    cfg: ObjectiveConfig,
    step: int = 0,
    seed: int = 0,
    index: int = 0,
    frozen_targets: Optional[np.ndarray] = None,
) -> ObjectiveTerms:
    """
    Forward one sequence and assemble NTP, NITP and the combined loss.

    Args:
        model: Model to evaluate
        head: Projection head, None when the projector is off or NITP disabled
        tokens: Token ids of one sequence
        cfg: Objective switches
        step: Training step (for start-step gating and regularizer sampling)
        seed: Run seed for the regularizer's pair sampler
        index: Sequence index within the batch
        frozen_targets: Replace the implicit targets by these constants

    Returns:
        ObjectiveTerms with the graph still live on ``total``
    """
    logits, trace = forward(model, tokens)
    ntp = ntp_loss(logits, tokens)
    if not cfg.enabled:
        return ObjectiveTerms(ntp=ntp, nitp=None, total=ntp, alignment=None, logits=logits, trace=trace)

    if cfg.loss_family == LossFamily.GENERIC_COSINE_REG:
        rows = take_rows(trace.final, prediction_positions(trace.final.shape[0], TemporalShift.NEXT_TOKEN))
        nitp = generic_cosine_regularizer(rows, cfg.regularizer_pairs, regularizer_rng(seed, step, index))
        total = total_loss(ntp, nitp, cfg.nitp_lambda, step, cfg.nitp_start_step)
        return ObjectiveTerms(ntp=ntp, nitp=nitp, total=total, alignment=None, logits=logits, trace=trace)

    targets = extract_implicit_tokens(trace, cfg)
    if frozen_targets is not None:
        targets = Tensor(frozen_targets)
    positions = prediction_positions(trace.final.shape[0], cfg.temporal_shift)
    pred = take_rows(trace.final, positions)
    if cfg.use_projector:
        if head is None:
            raise ValueError("use_projector is set but no projection head was given")
        pred = head(pred)
    nitp = nitp_loss(pred, targets, cfg.loss_family, cfg)
    alignment = cosine_alignment(pred, targets)
    total = total_loss(ntp, nitp, cfg.nitp_lambda, step, cfg.nitp_start_step)
    return ObjectiveTerms(
        ntp=ntp, nitp=nitp, total=total, alignment=alignment, logits=logits, trace=trace, targets=targets
    )


def cosine_alignment(pred: Tensor, targets: Tensor) -> Optional[float]:
    """Mean cosine s between predictions and targets (None if a row has zero norm)."""
    p, t = pred.values, targets.values
    norms = np.linalg.norm(p, axis=1) * np.linalg.norm(t, axis=1)
    if np.any(norms == 0):
        return None
    return float(np.mean(np.sum(p * t, axis=1) / norms))
