"""
Closed-form geometry of the cosine NITP loss and its numerical verification.

For a hidden state h and a target z write r = ‖h‖, u = h/r, v = z/‖z‖,
s = uᵀv and A = v − s·u (the component of v orthogonal to u). The loss
L(h) = 1 − cos(h, z) then has

- gradient  ∇L = −A / r
- Hessian   H = (1/r²)·[ s(I − uuᵀ) + uAᵀ + Auᵀ ]

so the radial direction u carries no curvature (uᵀHu = 0) while every
tangent direction w ⟂ u has curvature s‖w‖²/r². Added to a rank-deficient
NTP Hessian with weight λ, this lifts the tangent null space to λ·s‖w‖²/r².

This module provides the closed forms, central finite-difference oracles,
the spectral-lifting check on synthetic NTP Hessians, an empirical
curvature probe through a real model, and the ``verify`` suite.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import eigh

from .configs.objective_config import ObjectiveConfig
from .model import forward
from .objectives import extract_implicit_tokens, nitp_loss, prediction_positions
from .tensor import DegenerateVectorError, NumericError, Tensor, backward, cosine_similarity, no_grad

logger = logging.getLogger(__name__)

GRAD_STEP = 1e-5
HESSIAN_STEP = 1e-4
CURVATURE_STEP = 1e-3
TANGENT_TOL = 1e-10


class NotTangentError(ValueError):
    """Raised when a direction is not orthogonal to the radial direction u."""
    pass


@dataclass(frozen=True)
class CosineGeometry:
    """Quantities r, u, v, s, A of a (h, z) pair."""
    h: np.ndarray
    z: np.ndarray
    r: float
    u: np.ndarray
    v: np.ndarray
    s: float
    A: np.ndarray

    @classmethod
    def from_vectors(cls, h, z) -> "CosineGeometry":
        """
        Raises:
            DegenerateVectorError: If h or z has zero norm
        """
        h = np.asarray(h, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        if h.ndim != 1 or h.shape != z.shape:
            raise ValueError(f"h and z must be vectors of equal length, got {h.shape} and {z.shape}")
        r = float(np.linalg.norm(h))
        z_norm = float(np.linalg.norm(z))
        if r == 0.0 or z_norm == 0.0:
            raise DegenerateVectorError("Cosine geometry is undefined for a zero-norm vector")
        u = h / r
        v = z / z_norm
        s = float(np.clip(u @ v, -1.0, 1.0))
        return cls(h=h, z=z, r=r, u=u, v=v, s=s, A=v - s * u)

    @property
    def dim(self) -> int:
        return self.h.shape[0]


def cosine_loss(h: np.ndarray, z: np.ndarray) -> float:
    """1 − cos(h, z) evaluated in plain numpy."""
    return float(1.0 - (h @ z) / (np.linalg.norm(h) * np.linalg.norm(z)))


def nitp_grad_closed(geom: CosineGeometry) -> np.ndarray:
    """∇_h (1 − cos(h, z)) = −A / r."""
    return -geom.A / geom.r


def nitp_hessian_closed(geom: CosineGeometry) -> np.ndarray:
    """(1/r²)·[ s(I − uuᵀ) + uAᵀ + Auᵀ ]."""
    u, A = geom.u, geom.A
    d = geom.dim
    inner = geom.s * (np.eye(d) - np.outer(u, u)) + np.outer(u, A) + np.outer(A, u)
    return inner / geom.r**2


def _check_tangent(geom: CosineGeometry, w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != geom.u.shape:
        raise ValueError(f"Direction shape {w.shape} does not match dimension {geom.dim}")
    if abs(geom.u @ w) > TANGENT_TOL * np.linalg.norm(w):
        raise NotTangentError(f"Direction is not tangent: |uᵀw| = {abs(geom.u @ w):.3e}")
    return w


def tangent_curvature(geom: CosineGeometry, w) -> float:
    """
    wᵀHw for a tangent direction w, from the closed-form Hessian.

    Raises:
        NotTangentError: If |uᵀw| > 1e-10·‖w‖
    """
    w = _check_tangent(geom, w)
    return float(w @ nitp_hessian_closed(geom) @ w)


def predicted_tangent_curvature(geom: CosineGeometry, w) -> float:
    """s·‖w‖²/r²."""
    w = np.asarray(w, dtype=np.float64)
    return geom.s * float(w @ w) / geom.r**2


def tangent_basis(u: np.ndarray) -> np.ndarray:
    """Orthonormal basis (d × d−1, as columns) of the complement of u."""
    u = np.asarray(u, dtype=np.float64)
    u = u / np.linalg.norm(u)
    # Householder reflection mapping e_1 to u; its other columns span u⟂.
    e1 = np.zeros_like(u)
    e1[0] = 1.0
    w = u - e1
    if np.linalg.norm(w) < 1e-15:
        return np.eye(u.size)[:, 1:]
    w = w / np.linalg.norm(w)
    reflector = np.eye(u.size) - 2.0 * np.outer(w, w)
    return reflector[:, 1:]


def random_tangent(u: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random direction orthogonalized against u (one Gram–Schmidt step, repeated once)."""
    w = rng.normal(size=u.shape)
    for _ in range(2):
        w = w - (u @ w) * u
    return w


# ---------------------------------------------------------------------------
# Finite-difference oracles


def _finite(value: float, where: str) -> float:
    if not np.isfinite(value):
        raise NumericError(f"Non-finite evaluation {value} {where}")
    return value


def fd_gradient(f: Callable[[np.ndarray], float], x, step: float = GRAD_STEP) -> np.ndarray:
    """
    Central-difference gradient of a scalar function.

    Raises:
        NumericError: If an evaluation is not finite
    """
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = _finite(f(x), f"at +step of coordinate {i}")
        flat[i] = orig - step
        down = _finite(f(x), f"at -step of coordinate {i}")
        flat[i] = orig
        grad[i] = (up - down) / (2.0 * step)
    return grad.reshape(x.shape)


def fd_hessian(
    f: Optional[Callable[[np.ndarray], float]],
    x,
    step: float = HESSIAN_STEP,
    grad: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> np.ndarray:
    """
    Central-difference Hessian, symmetrized as (H + Hᵀ)/2.

    With ``grad`` given, columns are central differences of the gradient;
    otherwise second differences of ``f`` are used.

    Raises:
        NumericError: If an evaluation is not finite
    """
    x = np.array(x, dtype=np.float64).reshape(-1)
    n = x.size
    hess = np.zeros((n, n))
    if grad is not None:
        for j in range(n):
            e = np.zeros(n)
            e[j] = step
            g_up = np.asarray(grad(x + e), dtype=np.float64)
            g_down = np.asarray(grad(x - e), dtype=np.float64)
            if not (np.all(np.isfinite(g_up)) and np.all(np.isfinite(g_down))):
                raise NumericError(f"Non-finite gradient evaluation along coordinate {j}")
            hess[:, j] = (g_up - g_down) / (2.0 * step)
        return 0.5 * (hess + hess.T)

    if f is None:
        raise ValueError("fd_hessian needs f or grad")
    f0 = _finite(f(x), "at the centre point")
    for i in range(n):
        ei = np.zeros(n)
        ei[i] = step
        hess[i, i] = (_finite(f(x + ei), "") - 2.0 * f0 + _finite(f(x - ei), "")) / step**2
        for j in range(i + 1, n):
            ej = np.zeros(n)
            ej[j] = step
            val = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (4.0 * step**2)
            hess[i, j] = hess[j, i] = _finite(val, f"at pair ({i}, {j})")
    return 0.5 * (hess + hess.T)


def autodiff_cosine_grad(h: np.ndarray, z: np.ndarray) -> np.ndarray:
    """∇_h (1 − cos(h, z)) computed by the autodiff core."""
    ht = Tensor(h, requires_grad=True)
    loss = Tensor(1.0) - cosine_similarity(ht, Tensor(z))
    backward(loss)
    return ht.grad.copy()


# ---------------------------------------------------------------------------
# Spectral lifting


@dataclass
class HessianReport:
    """Outcome of one Hessian check."""
    analytic: np.ndarray
    fd: np.ndarray
    max_abs_err: float
    radial_curvature: float
    tangent_curvatures: List[Tuple[float, float]] = field(default_factory=list)
    min_lifted_eigenvalue: Optional[float] = None
    max_lift_err: Optional[float] = None

    @property
    def symmetry_err(self) -> float:
        return float(np.max(np.abs(self.analytic - self.analytic.T)))


def synthetic_ntp_hessian(
    geom: CosineGeometry, rank: int, rng: np.random.Generator
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Rank-deficient PSD stand-in for an NTP Hessian.

    The curvature lives on ``rank`` tangent directions; the returned null basis
    (columns) holds the remaining d−1−rank tangent directions.
    """
    basis = tangent_basis(geom.u)
    if not 0 <= rank <= basis.shape[1]:
        raise ValueError(f"rank {rank} outside [0, {basis.shape[1]}]")
    mixed = basis @ np.linalg.qr(rng.normal(size=(basis.shape[1], basis.shape[1])))[0]
    span, null = mixed[:, :rank], mixed[:, rank:]
    weights = rng.uniform(0.5, 2.0, size=rank)
    return (span * weights) @ span.T, null


def spectral_lifting_check(
    h_ntp: np.ndarray, geom: CosineGeometry, lam: float, null_basis: np.ndarray
) -> HessianReport:
    """
    Check that λ·H_NITP lifts every null direction of ``h_ntp`` to λ·s‖w‖²/r².

    Args:
        h_ntp: Symmetric d×d NTP Hessian stand-in
        geom: Cosine geometry at the evaluation point
        lam: NITP weight λ
        null_basis: d×m matrix whose columns are tangent null directions

    Raises:
        ValueError: If ``h_ntp`` is not symmetric
        NotTangentError: If a basis column is not tangent
    """
    h_ntp = np.asarray(h_ntp, dtype=np.float64)
    if h_ntp.shape != (geom.dim, geom.dim):
        raise ValueError(f"H_ntp shape {h_ntp.shape} does not match dimension {geom.dim}")
    if np.max(np.abs(h_ntp - h_ntp.T)) > 1e-12 * max(1.0, np.max(np.abs(h_ntp))):
        raise ValueError("H_ntp is not symmetric")
    null_basis = np.asarray(null_basis, dtype=np.float64).reshape(geom.dim, -1)

    h_nitp = nitp_hessian_closed(geom)
    analytic = h_ntp + lam * h_nitp
    fd = h_ntp + lam * fd_hessian(None, geom.h, grad=lambda x: autodiff_cosine_grad(x, geom.z))

    pairs = []
    for w in null_basis.T:
        _check_tangent(geom, w)
        measured = float(w @ analytic @ w)
        pairs.append((measured, lam * predicted_tangent_curvature(geom, w)))
    restricted = null_basis.T @ analytic @ null_basis
    min_lifted = float(eigh(0.5 * (restricted + restricted.T), eigvals_only=True).min()) if pairs else None
    return HessianReport(
        analytic=analytic,
        fd=fd,
        max_abs_err=float(np.max(np.abs(analytic - fd))),
        radial_curvature=float(geom.u @ analytic @ geom.u),
        tangent_curvatures=pairs,
        min_lifted_eigenvalue=min_lifted,
        max_lift_err=max((abs(a - b) for a, b in pairs), default=0.0),
    )


def high_alignment_geometry(d: int, rng: np.random.Generator, noise: float = 0.05) -> CosineGeometry:
    """z = h + noise·‖h‖·n̂, so that s ≥ sqrt(1 − noise²) > 0.99."""
    h = rng.normal(size=d)
    n = rng.normal(size=d)
    z = h + noise * np.linalg.norm(h) * n / np.linalg.norm(n)
    return CosineGeometry.from_vectors(h, z)


def random_geometry(d: int, rng: np.random.Generator) -> CosineGeometry:
    """Independent random directions with norms drawn from [0.5, 2]."""
    def vec():
        x = rng.normal(size=d)
        return rng.uniform(0.5, 2.0) * x / np.linalg.norm(x)
    return CosineGeometry.from_vectors(vec(), vec())


# ---------------------------------------------------------------------------
# Empirical probe through a model


def projected_loss_curvature(
    model,
    tokens,
    direction,
    objective_cfg: ObjectiveConfig,
    head=None,
    position: int = 0,
    step: float = CURVATURE_STEP,
) -> float:
    """
    Second directional derivative of the NITP loss of one prediction position.

    The final hidden state h at ``position`` is perturbed along ``direction``
    (unit norm); the loss goes through the projector when ``head`` is given and
    ``use_projector`` is set, and is measured against the implicit target of
    that position. Central second difference with step 1e-3.

    Raises:
        ValueError: If the direction is not a unit d-vector or the position has no target
        NumericError: On a non-finite loss
    """
    direction = np.asarray(direction, dtype=np.float64)
    if direction.shape != (model.config.hidden_dim,) or abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector in activation space")
    with no_grad():
        _, trace = forward(model, tokens)
        positions = prediction_positions(trace.final.shape[0], objective_cfg.temporal_shift)
        targets = extract_implicit_tokens(trace, objective_cfg).values
        rows = np.flatnonzero(positions == position)
        if rows.size == 0:
            raise ValueError(
                f"Position {position} has no implicit target under {objective_cfg.temporal_shift.value}; "
                f"valid positions are {int(positions[0])}..{int(positions[-1])}"
            )
        row = int(rows[0])
        h = trace.final.values[position]
        z = Tensor(targets[row:row + 1])

        def loss_at(eps: float) -> float:
            pred = Tensor((h + eps * direction)[None, :])
            if head is not None and objective_cfg.use_projector:
                pred = head(pred)
            value = nitp_loss(pred, z, objective_cfg.loss_family, objective_cfg).item()
            if not np.isfinite(value):
                raise NumericError(f"Non-finite NITP loss at offset {eps}")
            return value

        return (loss_at(step) - 2.0 * loss_at(0.0) + loss_at(-step)) / step**2


# ---------------------------------------------------------------------------
# Verification suite


@dataclass
class VerifyCase:
    """One row of the ``verify`` table."""
    case_id: str
    dim: int
    grad_err: float
    hess_err: float
    symmetry_err: float
    radial: float
    tangent_err: float
    min_lifted: Optional[float] = None
    lift_err: Optional[float] = None

    @property
    def passed(self) -> bool:
        ok = (
            self.grad_err <= 1e-8
            and self.hess_err <= 1e-5
            and self.symmetry_err <= 1e-12
            and self.radial <= 1e-12
            and self.tangent_err <= TANGENT_TOL
        )
        if self.lift_err is not None:
            ok = ok and self.lift_err <= 1e-8
        return ok

    def machine_line(self) -> str:
        lifted = "nan" if self.min_lifted is None else f"{self.min_lifted:.6e}"
        return (
            f"case={self.case_id} d={self.dim} max_abs_err={self.hess_err:.3e} "
            f"grad_err={self.grad_err:.3e} radial={self.radial:.3e} min_lifted={lifted} "
            f"pass={int(self.passed)}"
        )


def verify_case(geom: CosineGeometry, rng: np.random.Generator, case_id: str, tangents: int = 10) -> VerifyCase:
    """Gradient, Hessian, radial and tangent checks at one geometry."""
    f = lambda x: cosine_loss(x, geom.z)  # noqa: E731
    grad_err = float(np.max(np.abs(nitp_grad_closed(geom) - fd_gradient(f, geom.h))))
    hess = nitp_hessian_closed(geom)
    fd = fd_hessian(None, geom.h, grad=lambda x: autodiff_cosine_grad(x, geom.z))
    scale = max(float(np.max(np.abs(hess))), np.finfo(float).tiny)
    tangent_err = 0.0
    for _ in range(tangents):
        w = random_tangent(geom.u, rng)
        gap = abs(tangent_curvature(geom, w) - predicted_tangent_curvature(geom, w))
        tangent_err = max(tangent_err, gap / (float(w @ w) / geom.r**2))
    return VerifyCase(
        case_id=case_id,
        dim=geom.dim,
        grad_err=grad_err,
        hess_err=float(np.max(np.abs(hess - fd))),
        symmetry_err=float(np.max(np.abs(hess - hess.T))),
        radial=abs(float(geom.u @ hess @ geom.u)) / scale,
        tangent_err=tangent_err,
    )


def run_verification(
    dims: Sequence[int] = (3, 8, 32, 128),
    cases: int = 50,
    seed: int = 0,
    lambdas: Sequence[float] = (0.0, 0.5, 0.8, 1.0),
) -> List[VerifyCase]:
    """
    Closed-form checks over random geometries plus spectral-lifting cases.

    Lifting cases use d=16, a rank-2 synthetic NTP Hessian and a
    high-alignment geometry, once per λ.
    """
    rng = np.random.default_rng(seed)
    rows: List[VerifyCase] = []
    for d in dims:
        for c in range(cases):
            rows.append(verify_case(random_geometry(d, rng), rng, f"d{d}-{c}"))
    for lam in lambdas:
        geom = high_alignment_geometry(16, rng)
        h_ntp, null = synthetic_ntp_hessian(geom, 2, rng)
        report = spectral_lifting_check(h_ntp, geom, lam, null)
        row = verify_case(geom, rng, f"lift-{lam:g}")
        row.min_lifted = report.min_lifted_eigenvalue
        row.lift_err = report.max_lift_err
        rows.append(row)
    failed = sum(not r.passed for r in rows)
    logger.info(f"Verified {len(rows)} cases, {failed} failed")
    return rows
