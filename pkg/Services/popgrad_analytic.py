"""Closed-form population gating function and population gradients.

All values are per-sample expectations under ``x ~ N(0, I)``: the sample
count that multiplies the textbook formulas is divided out, so the empirical
module averages with ``1/n`` and the two are directly comparable.

Gradient arrays are ``K``-by-``d``; row ``j`` is the gradient with respect to
``w_j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from Services.errors import DomainError
from Services.geometry import (
    NORM_FLOOR,
    Matrix,
    Vector,
    WeightSet,
    angle,
    angle_matrix,
    as_unit_vector,
    as_vector,
    check_compatible,
    check_same_dimension,
)

TWO_PI = 2.0 * math.pi


### Population gating function ###


@dataclass(frozen=True, eq=False)
class PGResult:
    """Expected gated product split into its mass and asymmetric terms.

    ``vector == mass_coeff * w + asym_coeff * e``.
    """

    vector: Vector
    mass_coeff: float
    asym_coeff: float
    theta: float


def _checked_weight(w: Sequence[float] | np.ndarray, *, name: str = "w") -> tuple[Vector, float]:
    vector = as_vector(w, name=name)
    length = float(np.linalg.norm(vector))
    if length < NORM_FLOOR:
        raise DomainError(f"{name} has norm {length:.3g} below the floor {NORM_FLOOR:g}")
    return vector, length


def pg_function(e: Sequence[float] | np.ndarray, w: Sequence[float] | np.ndarray) -> PGResult:
    """``E[x (x.w) 1[x.e > 0] 1[x.w > 0]] = ((pi - theta) w + |w| sin(theta) e) / 2 pi``."""

    e_vec = as_unit_vector(e)
    w_vec, w_norm = _checked_weight(w)
    check_same_dimension(e_vec, w_vec)
    theta = angle(e_vec, w_vec)
    mass = (math.pi - theta) / TWO_PI
    asym = w_norm * math.sin(theta) / TWO_PI
    return PGResult(vector=mass * w_vec + asym * e_vec, mass_coeff=mass, asym_coeff=asym, theta=theta)


@dataclass(frozen=True)
class IsotropicKernel:
    """``E[F(e, w)] = A(theta) w + |w| B(theta) e`` for an isotropic input law."""

    name: str
    A: Callable[[float], float]  # noqa: N815
    B: Callable[[float], float]  # noqa: N815

    def validate(self, *, atol: float = 1e-12) -> None:
        """Gating fully on at 0 (``A = 1/2``), fully off at pi (``A = 0``), ``B`` vanishing at both."""
        checks = {
            "A(0) = 1/2": self.A(0.0) - 0.5,
            "A(pi) = 0": self.A(math.pi),
            "B(0) = 0": self.B(0.0),
            "B(pi) = 0": self.B(math.pi),
        }
        broken = [label for label, gap in checks.items() if abs(gap) > atol]
        if broken:
            raise DomainError(f"kernel {self.name!r} violates {', '.join(broken)}")


GAUSSIAN_KERNEL = IsotropicKernel(
    name="gaussian",
    A=lambda theta: (math.pi - theta) / TWO_PI,
    B=lambda theta: math.sin(theta) / TWO_PI,
)


def isotropic_pg(
    kernel: IsotropicKernel,
    e: Sequence[float] | np.ndarray,
    w: Sequence[float] | np.ndarray,
) -> Vector:
    e_vec = as_unit_vector(e)
    w_vec, w_norm = _checked_weight(w)
    check_same_dimension(e_vec, w_vec)
    theta = angle(e_vec, w_vec)
    return kernel.A(theta) * w_vec + w_norm * kernel.B(theta) * e_vec


### Gradients ###


def single_relu_grad(w: Sequence[float] | np.ndarray, w_star: Sequence[float] | np.ndarray) -> Vector:
    """``(w - w*)/2 + (theta w* - (|w*|/|w|) sin(theta) w) / 2 pi`` with ``theta = angle(w, w*)``."""

    w_vec, w_norm = _checked_weight(w)
    t_vec, t_norm = _checked_weight(w_star, name="w_star")
    check_same_dimension(w_vec, t_vec)
    theta = angle(w_vec, t_vec)
    return 0.5 * (w_vec - t_vec) + (theta * t_vec - (t_norm / w_norm) * math.sin(theta) * w_vec) / TWO_PI


def gradient_rows(
    W: Matrix,  # noqa: N803
    W_star: Matrix,  # noqa: N803
    a: Optional[Vector] = None,
    a_star: Optional[Vector] = None,
) -> Matrix:
    """Row ``j``: ``a_j [sum_j' a_j' pg(e_j, w_j') - sum_k a*_k pg(e_j, w*_k)]`` on raw arrays.

    Callers guarantee the norm floor; the integrators use this directly to
    skip re-validating every stage.
    """

    norms = np.linalg.norm(W, axis=1)
    star_norms = np.linalg.norm(W_star, axis=1)
    directions = W / norms[:, None]
    theta = angle_matrix(W, W)
    theta_star = angle_matrix(W, W_star)
    if a is None:
        a = np.ones(W.shape[0])
    if a_star is None:
        a_star = np.ones(W_star.shape[0])
    mass = (np.pi - theta) * a[None, :]
    mass_star = (np.pi - theta_star) * a_star[None, :]
    asym = (np.sin(theta) * norms[None, :]) @ a
    asym_star = (np.sin(theta_star) * star_norms[None, :]) @ a_star
    inner = mass @ W - mass_star @ W_star + (asym - asym_star)[:, None] * directions
    return a[:, None] * inner / TWO_PI


def multi_relu_grad(W: WeightSet, W_star: WeightSet) -> Matrix:  # noqa: N803
    check_compatible(W, W_star)
    return gradient_rows(W.vectors, W_star.vectors)


def _top_weights(values: Sequence[float] | np.ndarray, K: int, name: str) -> Vector:  # noqa: N803
    vector = np.asarray(values, dtype=np.float64)
    if vector.shape != (K,) or not np.all(np.isfinite(vector)):
        raise DomainError(f"{name} must hold {K} finite top weights, got shape {vector.shape}")
    return vector


def weighted_multi_relu_grad(
    W: WeightSet,  # noqa: N803
    W_star: WeightSet,  # noqa: N803
    a: Sequence[float] | np.ndarray,
    a_star: Sequence[float] | np.ndarray,
) -> Matrix:
    """Gradient of ``E[1/2 (sum_k a*_k relu(w*_k.x) - sum_j a_j relu(w_j.x))^2]``.

    The output is linear in the ReLU responses, so each row is the top weight
    ``a_j`` times the signed combination of gating-function terms.
    """

    check_compatible(W, W_star)
    return gradient_rows(
        W.vectors,
        W_star.vectors,
        _top_weights(a, W.K, "a"),
        _top_weights(a_star, W_star.K, "a_star"),
    )


def grad_norms(grad: Matrix) -> Vector:
    return np.linalg.norm(grad, axis=1)


__all__ = [
    "TWO_PI",
    "PGResult",
    "pg_function",
    "IsotropicKernel",
    "GAUSSIAN_KERNEL",
    "isotropic_pg",
    "single_relu_grad",
    "gradient_rows",
    "multi_relu_grad",
    "weighted_multi_relu_grad",
    "grad_norms",
]
