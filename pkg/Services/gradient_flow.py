"""Gradient-flow integration of the population dynamics ``dW/dt = -grad J(W)``.

Also hosts the single-ReLU Lyapunov certificate, the uniform-ball basin
experiment and the multi-run initialization sweeps.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from Services.errors import DomainError
from Services.geometry import (
    NORM_FLOOR,
    Matrix,
    RngSeed,
    Vector,
    WeightSet,
    as_vector,
    check_compatible,
    orthonormal_teacher,
    uniform_ball,
)
from Services.popgrad_analytic import TWO_PI, gradient_rows, single_relu_grad
from Util.parallel import ordered_map

logger = logging.getLogger(__name__)

NORM_CEILING = 1e6
TARGET_RTOL = 1e-3
EXHAUSTIVE_MATCH_LIMIT = 8


class Terminal(str, Enum):
    CONVERGED_TO_TARGET = "converged_to_target"
    CONVERGED_TO_POINT = "converged_to_point"
    MAX_STEPS = "max_steps"
    DIVERGED = "diverged"


### Target matching ###


@dataclass(frozen=True)
class TargetMatch:
    permutation: Tuple[int, ...]
    worst_relative_error: float

    @property
    def matched(self) -> bool:
        return self.worst_relative_error < TARGET_RTOL


def match_to_target(
    W: Matrix,  # noqa: N803
    W_star: Matrix,  # noqa: N803
    a: Optional[Vector] = None,
    a_star: Optional[Vector] = None,
) -> TargetMatch:
    """Best assignment of student rows to teacher rows by worst relative distance.

    With top weights, node ``j`` reproduces teacher node ``k`` exactly when
    ``a_j w_j = a*_k w*_k`` and the two top weights share a sign, so distances
    are taken between those products and sign mismatches never match.
    Exhaustive over all permutations up to ``EXHAUSTIVE_MATCH_LIMIT`` nodes,
    linear-sum assignment beyond.
    """

    top = np.ones(W.shape[0]) if a is None else np.asarray(a, dtype=np.float64)
    top_star = np.ones(W_star.shape[0]) if a_star is None else np.asarray(a_star, dtype=np.float64)
    effective = top[:, None] * W
    effective_star = top_star[:, None] * W_star
    star_norms = np.linalg.norm(effective_star, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cost = np.linalg.norm(effective[:, None, :] - effective_star[None, :, :], axis=2) / star_norms[None, :]
    same_sign = np.sign(top)[:, None] == np.sign(top_star)[None, :]
    cost = np.where(same_sign & np.isfinite(cost), cost, np.inf)
    K = cost.shape[0]  # noqa: N806
    if K <= EXHAUSTIVE_MATCH_LIMIT:
        perms = np.array(list(itertools.permutations(range(K))))
        worst = cost[np.arange(K)[None, :], perms].max(axis=1)
        best = int(np.argmin(worst))
        return TargetMatch(permutation=tuple(int(k) for k in perms[best]), worst_relative_error=float(worst[best]))
    rows, cols = linear_sum_assignment(np.where(np.isfinite(cost), cost, np.finfo(np.float64).max / (K + 1)))
    order = cols[np.argsort(rows)]
    return TargetMatch(
        permutation=tuple(int(k) for k in order),
        worst_relative_error=float(cost[np.arange(K), order].max()),
    )


### Flow ###


@dataclass
class Trajectory:
    times: List[float] = field(default_factory=list)
    states: List[WeightSet] = field(default_factory=list)
    grad_norms: List[float] = field(default_factory=list)
    lyapunov: Optional[List[float]] = None
    terminal: Terminal = Terminal.MAX_STEPS
    steps: int = 0
    note: Optional[str] = None
    match: Optional[TargetMatch] = None

    @property
    def final(self) -> WeightSet:
        return self.states[-1]


GradientField = Callable[[Matrix], Matrix]


def _rk4(state: Matrix, field_: GradientField, step: float) -> Matrix:
    k1 = -field_(state)
    k2 = -field_(state + 0.5 * step * k1)
    k3 = -field_(state + 0.5 * step * k2)
    k4 = -field_(state + step * k3)
    return state + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _euler(state: Matrix, field_: GradientField, step: float) -> Matrix:
    return state - step * field_(state)


INTEGRATORS: Dict[str, Callable[[Matrix, GradientField, float], Matrix]] = {"rk4": _rk4, "euler": _euler}


class _FloorHit(Exception):
    pass


def _guarded(field_: GradientField) -> GradientField:
    def _evaluate(state: Matrix) -> Matrix:
        norms = np.linalg.norm(state, axis=1)
        if not np.all(np.isfinite(state)) or np.any(norms < NORM_FLOOR):
            raise _FloorHit()
        return field_(state)

    return _evaluate


def flow(
    W0: WeightSet,  # noqa: N803
    W_star: WeightSet,  # noqa: N803
    a: Optional[Sequence[float]] = None,
    a_star: Optional[Sequence[float]] = None,
    *,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
    method: str = "rk4",
    record_every: int = 1,
) -> Trajectory:
    """Integrate the analytic population-gradient flow from ``W0``.

    Stops with ``converged_to_point`` once ``max_j |grad_j| < tol``, upgraded to
    ``converged_to_target`` when every node sits within relative distance 1e-3
    of a distinct teacher node (see ``match_to_target`` for top weights).
    Norms above 1e6 or below the floor end the run as ``diverged``.
    Single-node runs also record ``V = |w - w*|^2 / 2``.
    """

    check_compatible(W0, W_star)
    if step <= 0:
        raise DomainError("step must be positive")
    if method not in INTEGRATORS:
        raise DomainError(f"unknown integrator {method!r}")
    weighted = a is not None or a_star is not None
    top = np.ones(W0.K) if a is None else as_vector(a, name="a")
    top_star = np.ones(W0.K) if a_star is None else as_vector(a_star, name="a_star")
    if top.size != W0.K or top_star.size != W0.K:
        raise DomainError("top weights must have one entry per node")
    teacher = W_star.vectors
    field_ = _guarded(lambda state: gradient_rows(state, teacher, top, top_star))
    advance = INTEGRATORS[method]
    trajectory = Trajectory(lyapunov=[] if W0.K == 1 else None)
    state = np.array(W0.vectors)

    def _record(step_index: int, grad_norm: float) -> None:
        trajectory.times.append(step_index * step)
        trajectory.states.append(WeightSet.from_rows(state))
        trajectory.grad_norms.append(grad_norm)
        if trajectory.lyapunov is not None:
            diff = state[0] - teacher[0]
            trajectory.lyapunov.append(0.5 * float(diff @ diff))

    for step_index in range(max_steps + 1):
        norms = np.linalg.norm(state, axis=1)
        if not np.all(np.isfinite(state)) or np.any(norms > NORM_CEILING):
            trajectory.terminal = Terminal.DIVERGED
            trajectory.note = "weight norm exceeded the divergence ceiling"
            break
        if np.any(norms < NORM_FLOOR):
            trajectory.terminal = Terminal.DIVERGED
            trajectory.note = "weight reached the origin, where the population gradient is discontinuous"
            break
        grad_norm = float(np.max(np.linalg.norm(field_(state), axis=1)))
        done = grad_norm < tol or step_index == max_steps
        if step_index % record_every == 0 or done:
            _record(step_index, grad_norm)
        trajectory.steps = step_index
        if grad_norm < tol:
            trajectory.match = match_to_target(state, teacher, top, top_star)
            trajectory.terminal = (
                Terminal.CONVERGED_TO_TARGET if trajectory.match.matched else Terminal.CONVERGED_TO_POINT
            )
            break
        if step_index == max_steps:
            trajectory.terminal = Terminal.MAX_STEPS
            break
        try:
            state = advance(state, field_, step)
        except _FloorHit:
            trajectory.terminal = Terminal.DIVERGED
            trajectory.note = "weight reached the origin, where the population gradient is discontinuous"
            break

    if trajectory.terminal is Terminal.DIVERGED:
        logger.warning("flow diverged after %d steps: %s", trajectory.steps, trajectory.note)
    if trajectory.match is None:
        trajectory.match = match_to_target(state, teacher, top, top_star) if np.all(np.isfinite(state)) else None
    logger.debug(
        "flow finished (%s, weighted=%s) after %d steps", trajectory.terminal.value, weighted, trajectory.steps
    )
    return trajectory


def trajectory_rows(trajectory: Trajectory) -> Tuple[List[str], List[List[float]]]:
    """CSV table ``t, w_<j>_<i>..., grad_norm, V`` for a recorded trajectory."""

    first = trajectory.states[0]
    headers = ["t"] + [f"w_{j}_{i}" for j in range(first.K) for i in range(first.d)] + ["grad_norm", "V"]
    rows = []
    for index, (t, state, grad_norm) in enumerate(zip(trajectory.times, trajectory.states, trajectory.grad_norms)):
        value = trajectory.lyapunov[index] if trajectory.lyapunov is not None else float("nan")
        rows.append([t, *state.flatten().tolist(), grad_norm, value])
    return headers, rows


### Lyapunov certificate ###


def lyapunov_value_and_rate(w: Sequence[float] | np.ndarray, w_star: Sequence[float] | np.ndarray) -> Tuple[float, float]:
    """``V = |w - w*|^2 / 2`` and ``dV/dt = -(w - w*) . grad J``."""

    w_vec = as_vector(w, name="w")
    t_vec = as_vector(w_star, name="w_star")
    diff = w_vec - t_vec
    return 0.5 * float(diff @ diff), -float(diff @ single_relu_grad(w_vec, t_vec))


def lyapunov_form_matrix(theta: float) -> Matrix:
    """Symmetric ``M(theta)`` with ``dV/dt = -y^T M y / (2 pi)``, ``y = (|w*|, |w|)``.

    Positive definite for ``theta`` in ``(0, pi/2]``.
    """

    if not 0.0 <= theta <= math.pi / 2:
        raise DomainError("the Lyapunov certificate covers theta in [0, pi/2]")
    off = -(2 * math.pi - theta) * math.cos(theta) - math.sin(theta)
    return 0.5 * np.array(
        [
            [math.sin(2 * theta) + 2 * math.pi - 2 * theta, off],
            [off, 2 * math.pi],
        ]
    )


def lyapunov_form_rate(theta: float, w_norm: float, w_star_norm: float) -> float:
    y = np.array([w_star_norm, w_norm])
    return -float(y @ lyapunov_form_matrix(theta) @ y) / TWO_PI


def sampling_radius(d: int, epsilon: float, wstar_norm: float) -> float:
    """``epsilon * sqrt(2 pi / (d + 1)) * |w*|``."""

    if d < 1:
        raise DomainError("d must be at least 1")
    if not 0.0 < epsilon <= 1.0:
        raise DomainError("epsilon must lie in (0, 1]")
    return epsilon * math.sqrt(TWO_PI / (d + 1)) * wstar_norm


### Basin experiment ###


def _single_grad_batch(states: Matrix, w_star: Vector) -> Matrix:
    norms = np.linalg.norm(states, axis=1)
    star_norm = float(np.linalg.norm(w_star))
    s_hat = states / norms[:, None]
    t_hat = w_star / star_norm
    theta = 2.0 * np.arctan2(
        np.linalg.norm(s_hat - t_hat, axis=1), np.linalg.norm(s_hat + t_hat, axis=1)
    )
    return 0.5 * (states - w_star) + (
        theta[:, None] * w_star - (star_norm * np.sin(theta) / norms)[:, None] * states
    ) / TWO_PI


def batched_single_flow(
    starts: Matrix,
    w_star: Vector,
    *,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
) -> Tuple[List[Terminal], np.ndarray]:
    """RK4 single-node flow for many starts at once, with ``flow``'s terminal rules."""

    states = np.array(starts, dtype=np.float64)
    count = states.shape[0]
    status: List[Optional[Terminal]] = [None] * count
    steps = np.zeros(count, dtype=np.int64)
    active = np.arange(count)
    star_norm = float(np.linalg.norm(w_star))

    for step_index in range(max_steps + 1):
        if active.size == 0:
            break
        current = states[active]
        norms = np.linalg.norm(current, axis=1)
        bad = ~np.isfinite(norms) | (norms > NORM_CEILING) | (norms < NORM_FLOOR)
        safe = np.where(bad[:, None], w_star, current)
        grad = _single_grad_batch(safe, w_star)
        grad_norm = np.linalg.norm(grad, axis=1)
        done = ~bad & (grad_norm < tol)
        for local in np.flatnonzero(bad | done):
            index = int(active[local])
            steps[index] = step_index
            if bad[local]:
                status[index] = Terminal.DIVERGED
            elif float(np.linalg.norm(current[local] - w_star)) / star_norm < TARGET_RTOL:
                status[index] = Terminal.CONVERGED_TO_TARGET
            else:
                status[index] = Terminal.CONVERGED_TO_POINT
        keep = ~(bad | done)
        active = active[keep]
        if step_index == max_steps or active.size == 0:
            break
        current = current[keep]
        k1 = -_single_grad_batch(current, w_star)
        k2 = -_single_grad_batch(current + 0.5 * step * k1, w_star)
        k3 = -_single_grad_batch(current + 0.5 * step * k2, w_star)
        k4 = -_single_grad_batch(current + step * k3, w_star)
        states[active] = current + (step / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    for index in active:
        status[int(index)] = Terminal.MAX_STEPS
        steps[int(index)] = max_steps
    return [s if s is not None else Terminal.MAX_STEPS for s in status], steps


@dataclass(frozen=True)
class BasinResult:
    success_count: int
    trials: int
    lower_bound: float
    allowance: float
    radius: float
    terminals: Dict[str, int]

    @property
    def fraction(self) -> float:
        return self.success_count / self.trials

    @property
    def passed(self) -> bool:
        return self.fraction >= self.lower_bound - self.allowance


def basin_experiment(
    d: int,
    epsilon: float,
    wstar: Sequence[float] | np.ndarray,
    trials: int,
    rng: RngSeed,
    *,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
    threads: int = 1,
) -> BasinResult:
    """Start single-node flows uniformly in the ball of ``sampling_radius`` and count successes.

    The pass rule allows three binomial standard deviations below ``(1 - epsilon) / 2``.
    """

    if trials < 100:
        raise DomainError("the basin experiment needs at least 100 trials")
    w_star = as_vector(wstar, name="wstar")
    if w_star.size != d:
        raise DomainError(f"wstar has dimension {w_star.size}, expected {d}")
    radius = sampling_radius(d, epsilon, float(np.linalg.norm(w_star)))
    starts = np.vstack([uniform_ball(1, d, radius, rng.derive(t).generator()) for t in range(trials)])

    chunks = np.array_split(np.arange(trials), max(1, threads))
    results = ordered_map(
        lambda idx: batched_single_flow(starts[idx], w_star, step=step, max_steps=max_steps, tol=tol),
        [chunk for chunk in chunks if chunk.size],
        threads=threads,
    )
    terminals = [t for labels, _ in results for t in labels]
    counts = {member.value: sum(1 for t in terminals if t is member) for member in Terminal}
    lower = (1.0 - epsilon) / 2.0
    result = BasinResult(
        success_count=counts[Terminal.CONVERGED_TO_TARGET.value],
        trials=trials,
        lower_bound=lower,
        allowance=3.0 * math.sqrt(lower * (1.0 - lower) / trials),
        radius=radius,
        terminals=counts,
    )
    logger.info("basin d=%d eps=%.3g: %d/%d converged", d, epsilon, result.success_count, trials)
    return result


### Initialization sweeps ###


@dataclass(frozen=True)
class RunOutcome:
    label: str
    run: int
    terminal: Terminal
    steps: int
    relative_error: float


def noisy_start(W_star: WeightSet, noise: float, rng: RngSeed) -> WeightSet:  # noqa: N803
    """``1e-3 W* + xi`` with ``xi ~ N(0, (1e-3 noise)^2)`` entrywise."""

    xi = rng.generator().standard_normal(W_star.vectors.shape) * (1e-3 * noise)
    return WeightSet.from_rows(1e-3 * W_star.vectors + xi)


def _outcome(label: str, run: int, trajectory: Trajectory) -> RunOutcome:
    error = trajectory.match.worst_relative_error if trajectory.match is not None else float("nan")
    return RunOutcome(label=label, run=run, terminal=trajectory.terminal, steps=trajectory.steps, relative_error=error)


def noisy_init_experiment(
    K: int,  # noqa: N803
    d: int,
    noise_levels: Sequence[float],
    runs: int,
    rng: RngSeed,
    *,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
    threads: int = 1,
) -> List[RunOutcome]:
    teacher = orthonormal_teacher(K, d)
    tasks = [(level, run) for level in noise_levels for run in range(runs)]

    def _run(task: Tuple[float, int]) -> RunOutcome:
        level, run = task
        start = noisy_start(teacher, level, rng.derive(run))
        trajectory = flow(start, teacher, step=step, max_steps=max_steps, tol=tol, record_every=max_steps + 1)
        return _outcome(f"{level:g}", run, trajectory)

    return ordered_map(_run, tasks, threads=threads)


def sign_pattern(a: Sequence[float]) -> str:
    if all(v > 0 for v in a):
        return "positive"
    if all(v < 0 for v in a):
        return "negative"
    return "mixed"


def fixed_top_weights_experiment(
    K: int,  # noqa: N803
    a_values: Sequence[Sequence[float]],
    runs: int,
    rng: RngSeed,
    *,
    d: Optional[int] = None,
    noise: float = 0.1,
    step: float = 0.1,
    max_steps: int = 20000,
    tol: float = 1e-8,
    threads: int = 1,
) -> List[RunOutcome]:
    """Flows whose student top layer stays frozen at ``a``.

    The teacher is ``sum_j sigma(w*_j . x)`` with unit top weights. A positive
    pattern can still reproduce it with ``w_j = w*_j / a_j``; a pattern with a
    non-positive entry cannot. Run ``r`` uses the same noisy start for every
    pattern, so patterns differ only in their top weights.
    """

    if not a_values:
        raise DomainError("a_values must not be empty")
    d = K if d is None else d
    if d < K:
        raise DomainError("the orthonormal teacher needs d >= K")
    teacher = orthonormal_teacher(K, d)
    unit = np.ones(K)
    tasks = [(index, run) for index in range(len(a_values)) for run in range(runs)]

    def _run(task: Tuple[int, int]) -> RunOutcome:
        index, run = task
        top = np.asarray(a_values[index], dtype=np.float64)
        if top.shape != (K,):
            raise DomainError(f"pattern {index} needs {K} top weights")
        start = noisy_start(teacher, noise, rng.derive(run))
        trajectory = flow(
            start, teacher, top, unit, step=step, max_steps=max_steps, tol=tol, record_every=max_steps + 1
        )
        return _outcome(str(index), run, trajectory)

    return ordered_map(_run, tasks, threads=threads)


__all__ = [
    "Terminal",
    "TargetMatch",
    "match_to_target",
    "Trajectory",
    "flow",
    "trajectory_rows",
    "lyapunov_value_and_rate",
    "lyapunov_form_matrix",
    "lyapunov_form_rate",
    "sampling_radius",
    "batched_single_flow",
    "BasinResult",
    "basin_experiment",
    "RunOutcome",
    "noisy_start",
    "noisy_init_experiment",
    "sign_pattern",
    "fixed_top_weights_experiment",
]
