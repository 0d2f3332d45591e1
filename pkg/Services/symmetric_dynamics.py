"""Two-dimensional reduction of the ``K``-node flow under cyclic symmetry.

With an orthonormal teacher and student node ``j`` equal to the cyclic shift
of ``[x, y, ..., y]``, every node follows the same dynamics and the flow
collapses to the ``(x, y)`` plane. ``symmetric_2d_grad`` returns the pair
``-2 pi * (d/dx, d/dy) J``; the flow itself runs on ``(gx, gy) / 2 pi`` so its
clock matches the full ``K``-node flow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from Services.errors import DomainError
from Services.geometry import WeightSet, orthonormal_teacher
from Services.popgrad_analytic import TWO_PI

CONVERGENCE_RADIUS = 1e-3


@dataclass(frozen=True)
class SymmetricState:
    """Point ``(x, y)`` with its derived angles.

    ``theta`` is between a node and its own teacher, ``phi_star`` between a
    node and another teacher, ``phi`` between two student nodes.
    """

    x: float
    y: float
    K: int  # noqa: N815
    alpha: float
    theta: float
    phi: float
    phi_star: float


def symmetric_state(x: float, y: float, K: int) -> SymmetricState:  # noqa: N803
    if K < 2:
        raise DomainError("the symmetric reduction needs K >= 2")
    if x < 0 or y < 0:
        raise DomainError("symmetric coordinates must be non-negative")
    if x == 0 and y == 0:
        raise DomainError("the origin is a singular point of the dynamics")
    alpha = 1.0 / math.sqrt(x * x + (K - 1) * y * y)
    spread = (K - 1) * y * y
    theta = math.atan2(alpha * math.sqrt(spread), alpha * x)
    gap = alpha * (x - y)
    phi = math.atan2(abs(gap) * math.sqrt(max(0.0, 2.0 - gap * gap)), 1.0 - gap * gap)
    # x^2 + (K-2) y^2, written so that phi_star == theta bit for bit when x == y
    phi_star = math.atan2(alpha * math.sqrt(spread + (x - y) * (x + y)), alpha * y)
    return SymmetricState(x=x, y=y, K=K, alpha=alpha, theta=theta, phi=phi, phi_star=phi_star)


def symmetric_2d_grad(state: SymmetricState) -> Tuple[float, float]:
    x, y, K = state.x, state.y, state.K  # noqa: N806
    alpha, theta, phi, phi_star = state.alpha, state.theta, state.phi, state.phi_star
    common = (math.pi - phi) * (x - 1 + (K - 1) * y)
    radial = (K - 1) * (alpha * math.sin(phi_star) - math.sin(phi)) + alpha * math.sin(theta)
    gx = -(common + theta + phi * (x - 1)) + radial * x
    gy = -(common + (phi_star - phi) + phi * y) + radial * y
    return gx, gy


def grad_at(x: float, y: float, K: int) -> Tuple[float, float]:  # noqa: N803
    return symmetric_2d_grad(symmetric_state(x, y, K))


def embed_symmetric(x: float, y: float, K: int) -> Tuple[WeightSet, WeightSet]:  # noqa: N803
    """Student rows are cyclic shifts of ``[x, y, ..., y]``; the teacher is the identity basis."""

    if K < 2:
        raise DomainError("embedding needs K >= 2")
    if x == 0 and y == 0:
        raise DomainError("cannot embed the origin")
    base = np.full(K, float(y))
    base[0] = float(x)
    student = WeightSet.from_rows([np.roll(base, j) for j in range(K)])
    return student, orthonormal_teacher(K, K)


def saddle_value(K: int) -> float:  # noqa: N803
    """Diagonal fixed point ``(sqrt(K-1) - arccos(1/sqrt(K)) + pi) / (pi K)``."""

    if K < 2:
        raise DomainError("saddle_value needs K >= 2")
    return (math.sqrt(K - 1) - math.acos(1.0 / math.sqrt(K)) + math.pi) / (math.pi * K)


### Reparametrization ###


@dataclass(frozen=True)
class BetaParam:
    beta: float
    eps: float
    K: int  # noqa: N815

    @property
    def beta2(self) -> float:
        return math.sqrt((self.K - self.beta**2) / (self.K - 1))


def beta_reparam(x: float, y: float, K: int) -> BetaParam:  # noqa: N803
    if not x > y >= 0:
        raise DomainError("the reparametrization is defined for x > y >= 0")
    if K < 2:
        raise DomainError("the reparametrization needs K >= 2")
    eps = x - y
    alpha = 1.0 / math.sqrt(x * x + (K - 1) * y * y)
    return BetaParam(beta=math.sqrt(K - (K - 1) * (alpha * eps) ** 2), eps=eps, K=K)


def beta_inverse(beta: float, eps: float, K: int) -> Tuple[float, float]:  # noqa: N803
    """``alpha (y, x, eps) = (beta - beta2, beta + (K-1) beta2, K beta2) / K``."""

    if K < 2 or eps <= 0 or not 1.0 <= beta < math.sqrt(K):
        raise DomainError("need K >= 2, eps > 0 and beta in [1, sqrt(K))")
    beta2 = math.sqrt((K - beta * beta) / (K - 1))
    alpha = beta2 / eps
    return (beta + (K - 1) * beta2) / (K * alpha), (beta - beta2) / (K * alpha)


### Flow ###


@dataclass
class SymmetricTrajectory:
    K: int  # noqa: N815
    times: List[float] = field(default_factory=list)
    xs: List[float] = field(default_factory=list)
    ys: List[float] = field(default_factory=list)
    grads: List[Tuple[float, float]] = field(default_factory=list)
    terminal: str = "max_steps"
    steps: int = 0

    @property
    def y_detour(self) -> bool:
        """``y`` rose above its start before settling lower."""
        return max(self.ys) > self.ys[0] and self.ys[-1] < max(self.ys)


def classify_point(x: float, y: float, K: int) -> str:  # noqa: N803
    s = saddle_value(K)
    if math.hypot(x - 1.0, y) < CONVERGENCE_RADIUS:
        return "optimum"
    if math.hypot(x, y - 1.0) < CONVERGENCE_RADIUS:
        return "permuted_optimum"
    if math.hypot(x - s, y - s) < CONVERGENCE_RADIUS:
        return "saddle"
    return "stationary"


def symmetric_flow(
    x0: float,
    y0: float,
    K: int,  # noqa: N803
    *,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
    record_every: int = 1,
) -> SymmetricTrajectory:
    """RK4 on ``d(x, y)/dt = (gx, gy) / 2 pi`` until ``|(gx, gy)| / 2 pi < tol``.

    Terminal is ``optimum`` near (1, 0), ``permuted_optimum`` near (0, 1),
    ``saddle`` near the diagonal fixed point, ``stationary`` for any other
    resting point and ``max_steps`` otherwise.
    """

    if step <= 0:
        raise DomainError("step must be positive")
    symmetric_state(x0, y0, K)

    def _velocity(x: float, y: float) -> Tuple[float, float]:
        gx, gy = grad_at(x, y, K)
        return gx / TWO_PI, gy / TWO_PI

    trajectory = SymmetricTrajectory(K=K)
    x, y = float(x0), float(y0)
    for step_index in range(max_steps + 1):
        gx, gy = grad_at(x, y, K)
        speed = math.hypot(gx, gy) / TWO_PI
        stop = speed < tol or step_index == max_steps
        if step_index % record_every == 0 or stop:
            trajectory.times.append(step_index * step)
            trajectory.xs.append(x)
            trajectory.ys.append(y)
            trajectory.grads.append((gx, gy))
        trajectory.steps = step_index
        if speed < tol:
            trajectory.terminal = classify_point(x, y, K)
            break
        if step_index == max_steps:
            break
        k1 = _velocity(x, y)
        k2 = _velocity(max(0.0, x + 0.5 * step * k1[0]), max(0.0, y + 0.5 * step * k1[1]))
        k3 = _velocity(max(0.0, x + 0.5 * step * k2[0]), max(0.0, y + 0.5 * step * k2[1]))
        k4 = _velocity(max(0.0, x + step * k3[0]), max(0.0, y + step * k3[1]))
        x = max(0.0, x + step / 6.0 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]))
        y = max(0.0, y + step / 6.0 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))
    return trajectory


def symmetric_trajectory_rows(trajectory: SymmetricTrajectory) -> List[List[float]]:
    return [
        [t, x, y, g[0], g[1]]
        for t, x, y, g in zip(trajectory.times, trajectory.xs, trajectory.ys, trajectory.grads)
    ]


def vector_field(K: int, grid: int, bounds: Tuple[float, float] = (0.0, 1.0)) -> List[List[float]]:  # noqa: N803
    """Rows ``(x, y, gx, gy)`` on a ``grid``-by-``grid`` lattice, skipping the origin."""

    if grid < 8:
        raise DomainError("vector field grid needs at least 8 points per axis")
    lo, hi = bounds
    if not 0.0 <= lo < hi:
        raise DomainError("bounds must satisfy 0 <= lo < hi")
    axis = np.linspace(lo, hi, grid)
    rows = []
    for x in axis:
        for y in axis:
            if x == 0.0 and y == 0.0:
                continue
            gx, gy = grad_at(float(x), float(y), K)
            rows.append([float(x), float(y), gx, gy])
    return rows


__all__ = [
    "SymmetricState",
    "symmetric_state",
    "symmetric_2d_grad",
    "grad_at",
    "embed_symmetric",
    "saddle_value",
    "BetaParam",
    "beta_reparam",
    "beta_inverse",
    "SymmetricTrajectory",
    "classify_point",
    "symmetric_flow",
    "symmetric_trajectory_rows",
    "vector_field",
]
