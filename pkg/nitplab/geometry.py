"""
Representation-geometry probes over last-hidden-state batches.

Two diagnostics of representation degeneration:

- ``effective_rank``: exp of the entropy of the normalized covariance
  spectrum of mean-centered rows.
- ``avg_pairwise_cosine``: mean cosine similarity of randomly sampled row
  pairs after ℓ2 normalization (anisotropy).

Probes read detached copies of activations and never touch the autodiff graph.
"""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh

from .configs.probe_config import ProbeConfig
from .configs.objective_config import TemporalShift
from .model import ActivationTrace
from .tensor import Tensor

logger = logging.getLogger(__name__)

# Eigenvalues below this fraction of the largest are treated as numerical zeros.
SPECTRUM_FLOOR = 1e-12


class DegenerateInputError(ValueError):
    """Raised when a probe has no usable spread or direction in its input."""
    pass


@dataclass
class GeometrySnapshot:
    """Geometry of H_final at one training step."""
    step: int
    effective_rank: float
    avg_cosine: float
    num_tokens: int
    num_pairs: int

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _as_matrix(states: Union[Tensor, np.ndarray]) -> np.ndarray:
    x = states.values if isinstance(states, Tensor) else np.asarray(states, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"Expected an N×d matrix, got shape {x.shape}")
    if x.shape[0] < 2:
        raise ValueError(f"Need at least 2 rows, got {x.shape[0]}")
    return np.array(x, dtype=np.float64)


def covariance_spectrum(states: Union[Tensor, np.ndarray]) -> np.ndarray:
    """
    Eigenvalues of the N−1 normalized covariance of mean-centered rows.

    Negative eigenvalues from rounding are clamped to 0 and values below
    ``SPECTRUM_FLOOR`` times the largest are dropped.

    Raises:
        DegenerateInputError: If the centered matrix is all zeros
    """
    x = _as_matrix(states)
    centered = x - x.mean(axis=0, keepdims=True)
    if not np.any(centered):
        raise DegenerateInputError("All rows are identical; covariance is zero")
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals = np.clip(eigh(cov, eigvals_only=True), 0.0, None)
    top = eigvals.max()
    if top <= 0.0:
        raise DegenerateInputError("Covariance spectrum has no positive eigenvalue")
    return eigvals[eigvals >= SPECTRUM_FLOOR * top]


def effective_rank(states: Union[Tensor, np.ndarray]) -> float:
    """Entropy-based effective rank exp(−Σ p_i ln p_i) of the covariance spectrum."""
    eigvals = covariance_spectrum(states)
    p = eigvals / eigvals.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def pair_from_index(k, n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Map linear indices of the row-major upper triangle of an n×n matrix to (i, j)."""
    k = np.asarray(k, dtype=np.int64)
    i = n - 2 - np.floor(np.sqrt(4.0 * n * (n - 1) - 8.0 * k - 7.0) / 2.0 - 0.5).astype(np.int64)
    i = np.clip(i, 0, n - 2)
    # float sqrt can land one row off for large n
    start = i * (2 * n - i - 1) // 2
    i = np.where(start > k, i - 1, i)
    start = i * (2 * n - i - 1) // 2
    next_start = (i + 1) * (2 * n - i - 2) // 2
    i = np.where(next_start <= k, i + 1, i)
    start = i * (2 * n - i - 1) // 2
    return i, k - start + i + 1


def sample_pairs(n: int, num_pairs: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """
    Sample unordered distinct-index pairs without replacement.

    Returns every pair (in row-major upper-triangle order) when ``num_pairs``
    is at least C(n, 2). Otherwise only the sampled pairs are materialized.
    """
    if n < 2:
        raise ValueError(f"Need at least 2 items to form a pair, got {n}")
    if num_pairs < 1:
        raise ValueError(f"num_pairs must be positive, got {num_pairs}")
    total = n * (n - 1) // 2
    if num_pairs < total:
        first, second = pair_from_index(rng.choice(total, size=num_pairs, replace=False), n)
    else:
        first, second = np.triu_indices(n, k=1)
    logger.debug(f"Sampled {first.size} pairs out of {n} rows")
    return first, second


def _pairwise_cosine(states, num_pairs: int, rng: np.random.Generator) -> Tuple[float, int]:
    x = _as_matrix(states)
    norms = np.linalg.norm(x, axis=1)
    nonzero = norms > 0
    skipped = int((~nonzero).sum())
    if skipped:
        logger.warning(f"Excluded {skipped} zero-norm rows from pairwise cosine")
    if nonzero.sum() < 2:
        raise DegenerateInputError("Fewer than two rows with nonzero norm")
    unit = x[nonzero] / norms[nonzero, None]
    first, second = sample_pairs(unit.shape[0], num_pairs, rng)
    cosines = np.sum(unit[first] * unit[second], axis=1)
    return float(cosines.mean()), int(first.size)


def avg_pairwise_cosine(states: Union[Tensor, np.ndarray], num_pairs: int, rng: np.random.Generator) -> float:
    """
    Mean cosine similarity over sampled row pairs.

    Zero-norm rows are excluded (and counted in a warning).

    Raises:
        DegenerateInputError: If fewer than two rows have nonzero norm
    """
    return _pairwise_cosine(states, num_pairs, rng)[0]


def valid_rows(trace: ActivationTrace, shift: TemporalShift = TemporalShift.NEXT_TOKEN) -> np.ndarray:
    """H_final rows at positions that carry a training signal."""
    final = trace.final.values
    if shift == TemporalShift.NEXT_TOKEN and final.shape[0] > 1:
        return final[:-1]
    return final


def snapshot(
    trace: Union[ActivationTrace, Sequence[ActivationTrace]],
    step: int,
    probe_cfg: ProbeConfig,
) -> GeometrySnapshot:
    """
    Effective rank and average pairwise cosine of H_final at ``step``.

    Rows from every trace of a batch are pooled; the last position of each
    sequence is left out. Pair sampling is seeded by (probe seed, step).
    """
    traces = [trace] if isinstance(trace, ActivationTrace) else list(trace)
    rows = np.concatenate([valid_rows(t) for t in traces], axis=0)
    rng = np.random.default_rng((probe_cfg.seed, step))
    erank = effective_rank(rows)
    avg_cos, pairs = _pairwise_cosine(rows, probe_cfg.num_pairs, rng)
    snap = GeometrySnapshot(
        step=step, effective_rank=erank, avg_cosine=avg_cos, num_tokens=rows.shape[0], num_pairs=pairs
    )
    logger.debug(f"Snapshot at step {step}: erank={erank:.3f}, avg_cos={avg_cos:.4f}")
    return snap
