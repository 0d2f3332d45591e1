"""Normal-equation machinery for critical points of the two-layer population loss.

Angle conventions: ``Theta[i][j]`` is the angle between ``w_i`` and ``w_j``;
``Theta_star[k][j]`` is the angle between ``w*_k`` and ``w_j``. Rows of ``M``
and ``M*`` are ordered lexicographically by ``(j, j')`` so the diagonal
constraint for node ``j`` sits in row ``j * K + j`` (0-based).

Row ``(j, j')`` of ``M w_bar - M* w_bar*`` equals ``2 pi * grad_j . e_j'``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import brentq

from Services.errors import DomainError, SingularSystemError
from Services.geometry import (
    Matrix,
    Vector,
    WeightSet,
    angle,
    angle_matrix,
    check_compatible,
    rotation_fixing_subspace,
    teacher_angles,
    unit,
    wrap_angle,
)
from Services.popgrad_analytic import multi_relu_grad
from Util.parallel import ordered_map

logger = logging.getLogger(__name__)

CONDITION_LIMIT = 1e12
BOUNDARY_BAND = 1e-9
PLANE_TOLERANCE = 1e-9
SIGN_TOLERANCE = 1e-12


def _h(theta: np.ndarray | float) -> np.ndarray:
    return (np.pi - theta) * np.cos(theta) + np.sin(theta)


def h(theta: np.ndarray | float) -> np.ndarray | float:
    """``(pi - theta) cos(theta) + sin(theta)`` on ``[0, pi]``; strictly decreasing from pi to 0."""

    values = np.asarray(theta, dtype=np.float64)
    if np.any(values < 0.0) or np.any(values > np.pi) or not np.all(np.isfinite(values)):
        raise DomainError("h is defined on [0, pi]")
    result = _h(values)
    return float(result) if result.ndim == 0 else result


### Normal system ###


@dataclass(frozen=True, eq=False)
class NormalSystem:
    M: Matrix  # noqa: N815
    M_star: Matrix  # noqa: N815
    Mr: Matrix  # noqa: N815
    Mr_star: Matrix  # noqa: N815
    Theta: Matrix  # noqa: N815
    Theta_star: Matrix  # noqa: N815

    @property
    def K(self) -> int:  # noqa: N802
        return int(self.Mr.shape[0])


def _m_matrix(cross: Matrix, theta: Matrix) -> Matrix:
    """``m_{jj',k} = (pi - cross[k][j]) cos(cross[k][j']) + sin(cross[k][j]) cos(theta[j][j'])``."""

    K = theta.shape[0]  # noqa: N806
    by_node = cross.T  # [j][k]
    first = (np.pi - by_node)[:, None, :] * np.cos(by_node)[None, :, :]
    second = np.sin(by_node)[:, None, :] * np.cos(theta)[:, :, None]
    return (first + second).reshape(K * K, K)


def system_from_angles(theta: Matrix, theta_star: Matrix) -> NormalSystem:
    return NormalSystem(
        M=_m_matrix(theta, theta),
        M_star=_m_matrix(theta_star, theta),
        Mr=_h(theta.T),
        Mr_star=_h(theta_star.T),
        Theta=theta,
        Theta_star=theta_star,
    )


def assemble_normal_system(W: WeightSet, W_star: WeightSet) -> NormalSystem:  # noqa: N803
    check_compatible(W, W_star)
    return system_from_angles(W.angles(), teacher_angles(W, W_star))


def normal_equation_residual(sys: NormalSystem, wbar: Vector, wbar_star: Vector) -> Vector:
    """``M w_bar - M* w_bar*`` in ``(j, j')`` row order."""

    return sys.M @ np.asarray(wbar) - sys.M_star @ np.asarray(wbar_star)


@dataclass(frozen=True)
class ReducedSolution:
    """Solution of ``Mr w_bar = Mr* w_bar*``.

    ``magnitudes`` is ``None`` when the system is singular. Non-positive solved
    magnitudes rule out a critical point at these angles.
    """

    magnitudes: Optional[Tuple[float, ...]]
    condition: float
    singular: bool
    nonpositive: Tuple[int, ...] = ()

    @property
    def admissible(self) -> bool:
        return not self.singular and not self.nonpositive


def solve_reduced_magnitudes(sys: NormalSystem, wbar_star: Sequence[float]) -> ReducedSolution:
    star = np.asarray(wbar_star, dtype=np.float64)
    if star.shape != (sys.K,) or np.any(star <= 0.0):
        raise DomainError("teacher magnitudes must be K positive numbers")
    condition = float(np.linalg.cond(sys.Mr))
    if not math.isfinite(condition) or condition > CONDITION_LIMIT:
        logger.debug("reduced system singular (condition %.3g)", condition)
        return ReducedSolution(magnitudes=None, condition=condition, singular=True)
    solved = np.linalg.solve(sys.Mr, sys.Mr_star @ star)
    nonpositive = tuple(int(j) for j in np.flatnonzero(solved <= 0.0))
    return ReducedSolution(
        magnitudes=tuple(float(v) for v in solved),
        condition=condition,
        singular=False,
        nonpositive=nonpositive,
    )


def grad_norm_residual(W: WeightSet, W_star: WeightSet) -> float:  # noqa: N803
    """``max_j |grad_j|``; zero exactly at critical points."""

    return float(np.max(np.linalg.norm(multi_relu_grad(W, W_star), axis=1)))


### L function ###


def _l_coefficients(theta: Matrix, j: int, j_prime: int) -> Vector:
    """``Mr^-1 m_{jj'}`` for the self-angle matrix ``theta``."""

    K = theta.shape[0]  # noqa: N806
    if not (0 <= j < K and 0 <= j_prime < K):
        raise DomainError(f"node indices must lie in [0, {K})")
    reduced = _h(theta.T)
    condition = float(np.linalg.cond(reduced))
    if not math.isfinite(condition) or condition > CONDITION_LIMIT:
        raise SingularSystemError(f"Mr is singular (condition {condition:.3g})", condition=condition)
    m_row = _m_matrix(theta, theta)[j * K + j_prime]
    return np.linalg.solve(reduced, m_row)


def l_values(
    theta_star: np.ndarray,
    theta: Matrix,
    j: int,
    j_prime: int,
    coefficients: Optional[Vector] = None,
) -> np.ndarray:
    """``L_{jj'}`` for teacher-direction angles ``theta_star[..., l] = angle(e*, e_l)``.

    ``L = m*_{jj'} - v^T Mr^-1 m_{jj'}`` with ``v_l = h(theta*_l)`` and
    ``m*_{jj'} = (pi - theta*_j) cos(theta*_j') + sin(theta*_j) cos(theta[j][j'])``.
    """

    if coefficients is None:
        coefficients = _l_coefficients(theta, j, j_prime)
    tj = theta_star[..., j]
    m_star = (np.pi - tj) * np.cos(theta_star[..., j_prime]) + np.sin(tj) * np.cos(theta[j, j_prime])
    return m_star - _h(theta_star) @ coefficients


def L_function(  # noqa: N802
    j: int,
    j_prime: int,
    e_star: Sequence[float] | np.ndarray,
    E: np.ndarray,  # noqa: N803
    Theta: Optional[Matrix] = None,  # noqa: N803
) -> float:
    """Separable screening quantity ``L_{jj'}`` for one teacher direction (0-based indices)."""

    directions = np.asarray(E, dtype=np.float64)
    e_vec = unit(e_star, name="e_star")
    if directions.ndim != 2 or directions.shape[1] != e_vec.size:
        raise DomainError("E must be a K-by-d matrix matching e_star")
    theta = angle_matrix(directions, directions) if Theta is None else np.asarray(Theta, dtype=np.float64)
    theta_star = angle_matrix(e_vec[None, :], directions)[0]
    return float(l_values(theta_star, theta, j, j_prime))


def l12_closed_form(theta12: float, phi: float) -> float:
    """``L_12`` for ``K = 2`` in the plane with ``e1 = (1, 0)``, ``e2`` at ``theta12``, ``e*`` at ``phi``.

    ``L_12 = sin(t) [(pi - t*_1) sin(phi) - (pi - t) sin(t) beta]`` with
    ``[alpha, beta] = [h(t*_1), h(t*_2)] Mr^-1``.
    """

    t1 = float(wrap_angle(phi))
    t2 = float(wrap_angle(phi - theta12))
    reduced = _h(np.array([[0.0, theta12], [theta12, 0.0]]))
    _, beta = np.linalg.solve(reduced.T, np.array([_h(t1), _h(t2)]))
    return math.sin(theta12) * (
        (math.pi - t1) * math.sin(phi) - (math.pi - theta12) * math.sin(theta12) * beta
    )


### Cone tests ###


@dataclass(frozen=True)
class ConeClassification:
    label: str
    margin: float
    coefficients: Tuple[float, float]


def _label(margin: float) -> str:
    if abs(margin) <= BOUNDARY_BAND:
        return "boundary"
    return "interior" if margin > 0 else "exterior"


def cone_membership_2d(
    e_star: Sequence[float] | np.ndarray,
    e1: Sequence[float] | np.ndarray,
    e2: Sequence[float] | np.ndarray,
) -> ConeClassification:
    """Classify ``e*`` against ``Cone(e1, e2)``; ``margin = min(c1, c2)`` of ``e* = c1 e1 + c2 e2``."""

    first, second, target = unit(e1, name="e1"), unit(e2, name="e2"), unit(e_star, name="e_star")
    if first.size != second.size or first.size != target.size:
        raise DomainError("e_star, e1 and e2 must share a dimension")
    spread = angle(first, second)
    if spread < PLANE_TOLERANCE or spread > math.pi - PLANE_TOLERANCE:
        raise DomainError("e1 and e2 are collinear")
    basis = np.stack([first, second], axis=1)
    coeffs, *_ = np.linalg.lstsq(basis, target, rcond=None)
    if float(np.linalg.norm(basis @ coeffs - target)) > PLANE_TOLERANCE:
        raise DomainError("e_star is not in the plane of e1 and e2")
    margin = float(min(coeffs))
    return ConeClassification(label=_label(margin), margin=margin, coefficients=(float(coeffs[0]), float(coeffs[1])))


### Grid scan ###


@dataclass
class ScanReport:
    grid_phi: int
    grid_theta12: int
    counterexamples: int = 0
    worst_margin: float = math.inf
    checked_cells: int = 0
    boundary_cells: int = 0
    singular_rows: int = 0
    rows: List[Tuple[float, float, float, float, str]] = field(default_factory=list)
    violations: List[Tuple[float, float, float, float, str]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.counterexamples == 0


@dataclass
class _RowResult:
    counterexamples: int
    worst_margin: float
    checked: int
    boundary: int
    singular: bool
    rows: List[Tuple[float, float, float, float, str]]
    violations: List[Tuple[float, float, float, float, str]]


def _scan_row(theta12: float, phi: np.ndarray, keep_columns: np.ndarray, keep_row: bool) -> _RowResult:
    theta = np.array([[0.0, theta12], [theta12, 0.0]])
    try:
        c12 = _l_coefficients(theta, 0, 1)
        c21 = _l_coefficients(theta, 1, 0)
    except SingularSystemError:
        logger.warning("skipping singular scan row theta12=%.6g", theta12)
        return _RowResult(0, math.inf, 0, 0, True, [], [])

    theta_star = np.stack([wrap_angle(phi), wrap_angle(phi - theta12)], axis=1)
    l12 = l_values(theta_star, theta, 0, 1, c12)
    l21 = l_values(theta_star, theta, 1, 0, c21)

    c2 = np.sin(phi) / math.sin(theta12)
    c1 = np.cos(phi) - c2 * math.cos(theta12)
    margin = np.minimum(c1, c2)
    boundary = np.abs(margin) <= BOUNDARY_BAND
    sign = np.where(margin > 0, 1.0, -1.0)
    agreement = np.minimum(sign * l12, sign * l21)
    checked = ~boundary
    bad = checked & (agreement <= 0.0)
    labels = np.where(boundary, "boundary", np.where(margin > 0, "interior", "exterior"))

    def _record(k: int) -> Tuple[float, float, float, float, str]:
        return (theta12, float(phi[k]), float(l12[k]), float(l21[k]), str(labels[k]))

    rows = [_record(k) for k in np.flatnonzero(keep_columns)] if keep_row else []
    return _RowResult(
        counterexamples=int(np.count_nonzero(bad)),
        worst_margin=float(np.min(agreement[checked])) if np.any(checked) else math.inf,
        checked=int(np.count_nonzero(checked)),
        boundary=int(np.count_nonzero(boundary)),
        singular=False,
        rows=rows,
        violations=[_record(k) for k in np.flatnonzero(bad)],
    )


def scan_conjecture_2d(
    grid_phi: int,
    grid_theta12: int,
    *,
    threads: int = 1,
    csv_stride: int = 10,
) -> ScanReport:
    """Compare the signs of ``L_12`` and ``L_21`` with cone membership over a planar grid.

    ``theta12`` runs over the interior points ``pi * i / (grid_theta12 + 1)`` and
    ``e* = (cos phi, sin phi)`` over ``phi = 2 pi k / grid_phi``. Inside the cone
    both values must be positive, outside both negative; cells within the
    boundary band are excluded. ``worst_margin`` is the smallest sign-agreement
    value seen, so a positive number means no violation.
    """

    if grid_phi < 10 or grid_theta12 < 10:
        raise DomainError("scan grids need at least 10 points per axis")
    stride = max(1, int(csv_stride))
    phi = 2.0 * np.pi * np.arange(grid_phi) / grid_phi
    keep_columns = np.arange(grid_phi) % stride == 0
    thetas = [math.pi * (i + 1) / (grid_theta12 + 1) for i in range(grid_theta12)]

    results = ordered_map(
        lambda item: _scan_row(item[1], phi, keep_columns, item[0] % stride == 0),
        list(enumerate(thetas)),
        threads=threads,
    )
    report = ScanReport(grid_phi=grid_phi, grid_theta12=grid_theta12)
    for result in results:
        report.counterexamples += result.counterexamples
        report.worst_margin = min(report.worst_margin, result.worst_margin)
        report.checked_cells += result.checked
        report.boundary_cells += result.boundary
        report.singular_rows += int(result.singular)
        report.rows.extend(result.rows)
        report.violations.extend(result.violations)
    logger.info(
        "L12 scan %dx%d: %d counterexamples, worst margin %.3g",
        grid_theta12,
        grid_phi,
        report.counterexamples,
        report.worst_margin,
    )
    return report


### Screening and constructions ###


@dataclass(frozen=True)
class ScreeningResult:
    l12: Tuple[float, ...]
    l21: Tuple[float, ...]
    ruled_out: bool
    solution: ReducedSolution
    residual: Optional[float]


def screen_k2(E: np.ndarray, W_star: WeightSet) -> ScreeningResult:  # noqa: N803
    """Screen two student directions against every teacher direction.

    When all ``L_12`` (or all ``L_21``) values share a strict sign the
    off-diagonal normal equation cannot vanish, so no magnitudes make the
    pair critical. ``residual`` is the gradient residual at the magnitudes
    solved from the reduced system, when those are admissible.
    """

    directions = np.array([unit(row) for row in np.asarray(E, dtype=np.float64)])
    if directions.shape[0] != 2 or W_star.K != 2:
        raise DomainError("screening is defined for K = 2")
    theta = angle_matrix(directions, directions)
    theta_star = angle_matrix(W_star.directions, directions)
    l12 = l_values(theta_star, theta, 0, 1)
    l21 = l_values(theta_star, theta, 1, 0)

    def _same_sign(values: np.ndarray) -> bool:
        return bool(np.all(values > SIGN_TOLERANCE) or np.all(values < -SIGN_TOLERANCE))

    sys = system_from_angles(theta, theta_star)
    solution = solve_reduced_magnitudes(sys, W_star.norms)
    residual = None
    if solution.admissible and solution.magnitudes is not None:
        student = WeightSet.from_rows(directions * np.asarray(solution.magnitudes)[:, None])
        residual = grad_norm_residual(student, W_star)
    return ScreeningResult(
        l12=tuple(float(v) for v in l12),
        l21=tuple(float(v) for v in l21),
        ruled_out=_same_sign(l12) or _same_sign(l21),
        solution=solution,
        residual=residual,
    )


def collinear_saddle_k2(
    w1_star: Sequence[float] | np.ndarray,
    w2_star: Sequence[float] | np.ndarray,
    split: float,
) -> WeightSet:
    """Two student nodes on one ray, forming a critical point for any ``split`` in (0, 1).

    For equal teacher norms the ray is the bisector and the magnitudes sum to
    ``s = h(angle / 2) (|w*1| + |w*2|) / pi``. Otherwise the ray is where
    ``sum_k (pi - theta_k) w*_k`` becomes parallel to it, and
    ``s = sum_k |w*_k| h(theta_k) / pi``.
    """

    if not 0.0 < split < 1.0:
        raise DomainError("split must lie in (0, 1)")
    first = np.asarray(w1_star, dtype=np.float64)
    second = np.asarray(w2_star, dtype=np.float64)
    n1, n2 = float(np.linalg.norm(first)), float(np.linalg.norm(second))
    spread = angle(first, second)
    if spread < PLANE_TOLERANCE or spread > math.pi - PLANE_TOLERANCE:
        raise DomainError("teacher vectors must be linearly independent")
    e1 = first / n1
    if abs(n1 - n2) <= 1e-12 * max(n1, n2):
        psi = 0.5 * spread
        direction = unit(e1 + second / n2)
    else:
        in_plane = second / n2 - math.cos(spread) * e1
        q = in_plane / np.linalg.norm(in_plane)

        def _misalignment(psi_: float) -> float:
            normal = -math.sin(psi_) * e1 + math.cos(psi_) * q
            pull = (math.pi - psi_) * first + (math.pi - (spread - psi_)) * second
            return float(pull @ normal)

        psi = brentq(_misalignment, 0.0, spread, xtol=1e-15, rtol=4 * np.finfo(float).eps)
        direction = math.cos(psi) * e1 + math.sin(psi) * q
    total = (n1 * float(_h(psi)) + n2 * float(_h(spread - psi))) / math.pi
    return WeightSet.from_rows([split * total * direction, (1.0 - split) * total * direction])


@dataclass(frozen=True)
class OrbitCheck:
    residual_before: float
    residual_after: float
    rotated: WeightSet

    @property
    def gap(self) -> float:
        return abs(self.residual_after - self.residual_before)


def orbit_invariance_check(W: WeightSet, W_star: WeightSet, plane_angle: float) -> OrbitCheck:  # noqa: N803
    """Rotate the student by an out-of-plane rotation that fixes the teacher span."""

    check_compatible(W, W_star)
    rotation = rotation_fixing_subspace(W_star.vectors, W.d, plane_angle)
    rotated = W.transformed(rotation)
    return OrbitCheck(
        residual_before=grad_norm_residual(W, W_star),
        residual_after=grad_norm_residual(rotated, W_star),
        rotated=rotated,
    )


__all__ = [
    "CONDITION_LIMIT",
    "BOUNDARY_BAND",
    "h",
    "NormalSystem",
    "system_from_angles",
    "assemble_normal_system",
    "normal_equation_residual",
    "ReducedSolution",
    "solve_reduced_magnitudes",
    "grad_norm_residual",
    "l_values",
    "L_function",
    "l12_closed_form",
    "ConeClassification",
    "cone_membership_2d",
    "ScanReport",
    "scan_conjecture_2d",
    "ScreeningResult",
    "screen_k2",
    "collinear_saddle_k2",
    "OrbitCheck",
    "orbit_invariance_check",
]
