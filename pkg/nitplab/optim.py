"""AdamW, the warmup-stable-decay schedule and global gradient clipping."""

import logging
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from .configs.train_config import TrainConfig
from .tensor import DimensionError, NumericError, Tensor

logger = logging.getLogger(__name__)


def wsd_lr(step: int, cfg: TrainConfig) -> float:
    """
    Warmup-stable-decay learning rate.

    Linear ramp 0 → peak over ``warmup_steps``, constant peak until
    (1 − decay_ratio)·total_steps, then linear decay to 0 at ``total_steps``.

    Raises:
        ValueError: If step is outside [0, total_steps]
    """
    total = cfg.total_steps
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    peak = cfg.peak_lr
    if step < cfg.warmup_steps:
        return peak * step / cfg.warmup_steps
    decay_start = max(float(cfg.warmup_steps), (1.0 - cfg.decay_ratio) * total)
    if step <= decay_start:
        return peak
    return peak * (total - step) / (total - decay_start)


def decays(name: str, param: Tensor) -> bool:
    """Weight decay applies to matrices only, not to gains or other vectors."""
    return param.ndim >= 2 and "norm" not in name


@dataclass
class AdamWState:
    """First and second moments plus the bias-correction step count."""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def zeros(cls, params: Mapping[str, Tensor]) -> "AdamWState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.values) for k, p in params.items()},
            v={k: np.zeros_like(p.values) for k, p in params.items()},
        )


def adamw_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamWState,
    lr: float,
    cfg: TrainConfig,
) -> None:
    """
    One in-place AdamW update with decoupled weight decay.

    Missing gradients count as zeros.

    Raises:
        DimensionError: If a moment or gradient shape does not match its parameter
    """
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step
    for name, p in params.items():
        m, v = state.m.get(name), state.v.get(name)
        if m is None or v is None or m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"Optimizer state for '{name}' does not match parameter shape {p.shape}")
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.values)
        elif g.shape != p.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter {p.shape}")
        if cfg.weight_decay and decays(name, p):
            p.values *= 1.0 - lr * cfg.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)


class AdamW:
    """Stateful wrapper over ``adamw_step`` for a fixed parameter set."""

    def __init__(self, params: Mapping[str, Tensor], cfg: TrainConfig):
        self.params = dict(params)
        self.cfg = cfg
        self.state = AdamWState.zeros(self.params)

    def step(self, lr: float) -> None:
        adamw_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, lr, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def clip_grad_norm(params: Mapping[str, Tensor], max_norm: float = 1.0) -> float:
    """
    Scale all gradients so their global ℓ2 norm is at most ``max_norm``.

    Returns:
        The norm before clipping

    Raises:
        NumericError: If any gradient holds NaN or infinity (names the parameter)
    """
    total = 0.0
    for name, p in params.items():
        if p.grad is None:
            continue
        if not np.all(np.isfinite(p.grad)):
            raise NumericError(f"Non-finite gradient in parameter '{name}'")
        total += float(np.sum(p.grad * p.grad))
    norm = float(np.sqrt(total))
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad = p.grad * factor
        logger.debug(f"Clipped gradient norm {norm:.4f} to {max_norm}")
    return norm
