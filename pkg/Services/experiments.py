"""
Experiment runners behind the CLI and the HTTP API.

Each runner takes its validated config and returns an ``ExperimentOutcome``:
summary statistics, the declared acceptance checks, and the raw data table
that ends up in the run's CSV. Runners never touch the filesystem; the
controller persists whatever they return. All randomness flows from
``RngSeed(config.seed, config.stream_id)`` through derived per-trial streams,
so a rerun with the same config reproduces the table exactly.
"""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Sequence, Tuple

import numpy as np

from DAL.schemas import (
    AcceptanceCheck,
    BasinConfig,
    ErrorVsAngleConfig,
    ExperimentConfigBase,
    FixedTopWeightsConfig,
    FlowSingleConfig,
    MultilayerCheckConfig,
    NoisyInitConfig,
    ScanL12Config,
    SymmetricFieldConfig,
    SymmetricTrajectoriesConfig,
    UniformCheckConfig,
    VerifyFormulaConfig,
)
from Services.critical_points import scan_conjecture_2d
from Services.errors import DomainError
from Services.geometry import RngSeed, WeightSet, gaussian_batch, uniform_ball
from Services.gradient_flow import (
    Terminal,
    basin_experiment,
    fixed_top_weights_experiment,
    flow,
    lyapunov_form_matrix,
    noisy_init_experiment,
    sign_pattern,
)
from Services.multilayer import (
    LayeredNet,
    finite_difference_inflow,
    gradient_inflow,
    kink_distance,
    relative_gap,
)
from Services.popgrad_empirical import (
    empirical_grad,
    error_vs_angle_profile,
    error_vs_sample_size,
)
from Services.symmetric_dynamics import (
    grad_at,
    saddle_value,
    symmetric_flow,
    vector_field,
)
from Util.csv_writer import rows_to_csv_text
from Util.parallel import ordered_map

logger = logging.getLogger(__name__)

VECTOR_FIELD_HEADERS = ["x", "y", "gx", "gy"]
LYAPUNOV_GRID = 1000
LYAPUNOV_SLACK = 1e-15


@dataclass
class ExperimentOutcome:
    summary: Dict[str, Any]
    checks: List[AcceptanceCheck]
    headers: List[str]
    rows: List[List[Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)


def _check(name: str, passed: bool, observed: Any = None, threshold: Any = None) -> AcceptanceCheck:
    return AcceptanceCheck(name=name, passed=bool(passed), observed=observed, threshold=threshold)


def _seed(config: ExperimentConfigBase) -> RngSeed:
    return RngSeed(seed=config.seed, stream_id=config.stream_id)


### Monte-Carlo checks ###


def run_verify_formula(config: VerifyFormulaConfig) -> ExperimentOutcome:
    records = error_vs_sample_size(
        config.d,
        config.sizes,
        config.pairs,
        _seed(config),
        theta_max=config.theta_max,
        threads=config.threads,
    )
    by_size: Dict[int, List[float]] = defaultdict(list)
    for record in records:
        by_size[record.n].append(record.error)
    means = [float(np.mean(by_size[n])) for n in config.sizes]
    largest = config.sizes[-1]
    worst = float(np.max(by_size[largest]))
    decreasing = all(later < earlier for earlier, later in zip(means, means[1:]))

    summary: Dict[str, Any] = {f"mean_err_n{n}": m for n, m in zip(config.sizes, means)}
    summary.update({f"max_err_n{n}": float(np.max(by_size[n])) for n in config.sizes})
    checks = [
        _check("mean_error_decreases_with_n", decreasing, observed=means[-1], threshold=means[0]),
        _check(f"max_pair_error_at_n{largest}", worst < config.max_pair_error, worst, config.max_pair_error),
    ]
    rows = [[r.pair, r.n, r.theta, r.error, r.angle] for r in records]
    return ExperimentOutcome(summary, checks, ["pair", "n", "theta", "rel_error", "angle"], rows)


def run_error_vs_angle(config: ErrorVsAngleConfig) -> ExperimentOutcome:
    bins = error_vs_angle_profile(
        config.d,
        config.n,
        config.bins,
        _seed(config),
        pairs_per_bin=config.pairs_per_bin,
        threads=config.threads,
    )
    means = [b.mean_err for b in bins]
    finite = all(math.isfinite(m) and m >= 0 for m in means)
    summary = {
        "first_bin_mean_err": means[0],
        "last_bin_mean_err": means[-1],
        "max_err": max(b.max_err for b in bins),
    }
    checks = [
        _check("errors_finite", finite),
        _check("error_grows_toward_pi", means[0] < means[-1], means[-1], means[0]),
    ]
    rows = [[b.theta_lo, b.theta_hi, b.mean_err, b.max_err, b.pairs] for b in bins]
    return ExperimentOutcome(summary, checks, ["theta_lo", "theta_hi", "mean_err", "max_err", "pairs"], rows)


def run_uniform_check(config: UniformCheckConfig) -> ExperimentOutcome:
    records = error_vs_sample_size(
        config.d,
        [config.n],
        config.pairs,
        _seed(config),
        theta_max=config.theta_max,
        distribution="uniform_centered",
        threads=config.threads,
    )
    worst_angle = max(r.angle for r in records)
    summary = {
        "max_angle": worst_angle,
        "mean_scaled_error": float(np.mean([r.error for r in records])),
    }
    checks = [_check("direction_matches_up_to_scale", worst_angle < config.max_angle, worst_angle, config.max_angle)]
    rows = [[r.pair, r.n, r.theta, r.error, r.angle] for r in records]
    return ExperimentOutcome(summary, checks, ["pair", "n", "theta", "scaled_error", "angle"], rows)


### Critical points ###


def run_scan_l12(config: ScanL12Config) -> ExperimentOutcome:
    report = scan_conjecture_2d(
        config.grid_phi, config.grid_theta12, threads=config.threads, csv_stride=config.csv_stride
    )
    kept = set(report.rows)
    rows = [list(row) for row in report.rows]
    rows.extend(list(row) for row in report.violations if row not in kept)
    summary = {
        "grid_phi": report.grid_phi,
        "grid_theta12": report.grid_theta12,
        "counterexamples": report.counterexamples,
        "worst_margin": report.worst_margin,
        "checked_cells": report.checked_cells,
        "boundary_cells": report.boundary_cells,
        "singular_rows": report.singular_rows,
    }
    checks = [_check("no_counterexamples", report.passed, report.counterexamples, 0)]
    return ExperimentOutcome(summary, checks, ["theta12", "phi", "l12", "l21", "region"], rows)


### Flows ###


def _lyapunov_certificate() -> Tuple[float, float]:
    """Smallest determinant and smallest ``M[0, 0]`` of the rate matrix on ``(0, pi/2]``."""

    thetas = math.pi / 2 * np.arange(1, LYAPUNOV_GRID + 1) / LYAPUNOV_GRID
    mats = [lyapunov_form_matrix(float(t)) for t in thetas]
    return min(float(np.linalg.det(m)) for m in mats), min(float(m[0, 0]) for m in mats)


def run_flow_single(config: FlowSingleConfig) -> ExperimentOutcome:
    """Single-node flows started inside ``|w - w*| < |w*|``."""

    rng = _seed(config)
    w_star = rng.generator().standard_normal(config.d)
    teacher = WeightSet.from_rows([w_star])
    radius = 0.99 * float(np.linalg.norm(w_star))

    def _trial(t: int) -> List[Any]:
        start = w_star + uniform_ball(1, config.d, radius, rng.derive(t).generator())[0]
        trajectory = flow(
            WeightSet.from_rows([start]),
            teacher,
            step=config.step,
            max_steps=config.max_steps,
            tol=config.tol,
            method=config.method,
        )
        values = np.asarray(trajectory.lyapunov)
        rise = float(np.max(np.diff(values))) if values.size > 1 else 0.0
        error = trajectory.match.worst_relative_error if trajectory.match is not None else float("nan")
        return [t, trajectory.terminal.value, trajectory.steps, float(values[0]), float(values[-1]), rise, error]

    rows = ordered_map(_trial, range(config.trials), threads=config.threads)
    converged = sum(1 for row in rows if row[1] == Terminal.CONVERGED_TO_TARGET.value)
    worst_rise = max(row[5] for row in rows)
    min_det, min_diag = _lyapunov_certificate()
    summary = {
        "converged": converged,
        "trials": config.trials,
        "mean_steps": float(np.mean([row[2] for row in rows])),
        "max_lyapunov_rise": worst_rise,
        "min_rate_matrix_det": min_det,
        "min_rate_matrix_diag": min_diag,
    }
    checks = [
        _check("all_converged_to_target", converged == config.trials, converged, config.trials),
        _check("lyapunov_monotone", worst_rise <= LYAPUNOV_SLACK, worst_rise, LYAPUNOV_SLACK),
        _check("rate_matrix_positive_definite", min_det > 0 and min_diag > 0, min_det, 0.0),
    ]
    headers = ["trial", "terminal", "steps", "V_start", "V_end", "max_V_rise", "relative_error"]
    return ExperimentOutcome(summary, checks, headers, rows)


def run_basin(config: BasinConfig) -> ExperimentOutcome:
    rng = _seed(config)
    w_star = rng.generator().standard_normal(config.d)
    result = basin_experiment(
        config.d,
        config.epsilon,
        w_star,
        config.trials,
        rng.derive(1),
        step=config.step,
        max_steps=config.max_steps,
        tol=config.tol,
        threads=config.threads,
    )
    threshold = result.lower_bound - result.allowance
    summary = {
        "success_count": result.success_count,
        "trials": result.trials,
        "fraction": result.fraction,
        "lower_bound": result.lower_bound,
        "radius": result.radius,
    }
    checks = [_check("success_fraction_above_bound", result.passed, result.fraction, threshold)]
    rows = [[label, count] for label, count in result.terminals.items()]
    return ExperimentOutcome(summary, checks, ["terminal", "count"], rows)


def emit_vector_field(K: int, grid: int, bounds: Tuple[float, float] = (0.0, 1.0)) -> str:  # noqa: N803
    """CSV text of the symmetric vector field, one ``x, y, gx, gy`` row per lattice point."""

    return rows_to_csv_text(VECTOR_FIELD_HEADERS, vector_field(K, grid, bounds))


def run_symmetric_field(config: SymmetricFieldConfig) -> ExperimentOutcome:
    rows = vector_field(config.K, config.grid, (config.lo, config.hi))
    s = saddle_value(config.K)
    at_optimum = math.hypot(*grad_at(1.0, 0.0, config.K))
    at_saddle = math.hypot(*grad_at(s, s, config.K))
    summary = {"saddle_value": s, "grad_at_optimum": at_optimum, "grad_at_saddle": at_saddle, "points": len(rows)}
    checks = [
        _check("optimum_is_fixed_point", at_optimum <= 1e-12, at_optimum, 1e-12),
        _check("saddle_is_fixed_point", at_saddle <= 1e-8, at_saddle, 1e-8),
    ]
    return ExperimentOutcome(summary, checks, list(VECTOR_FIELD_HEADERS), rows)


def run_symmetric_trajectories(config: SymmetricTrajectoriesConfig) -> ExperimentOutcome:
    flow_args = {"step": config.step, "max_steps": config.max_steps, "tol": config.tol}
    k_first = config.Ks[0]
    starts = [("start", K, config.x0, config.y0) for K in config.Ks]
    starts += [
        ("diagonal", k_first, 0.5, 0.5),
        ("perturbed", k_first, 0.5, 0.5 - config.perturbation),
    ]

    def _run(task: Tuple[str, int, float, float]):
        label, K, x0, y0 = task  # noqa: N806
        return label, symmetric_flow(x0, y0, K, record_every=config.record_every, **flow_args)

    runs = ordered_map(_run, starts, threads=config.threads)
    rows: List[List[Any]] = []
    for label, trajectory in runs:
        for t, x, y, g in zip(trajectory.times, trajectory.xs, trajectory.ys, trajectory.grads):
            rows.append([label, trajectory.K, t, x, y, g[0], g[1]])

    main_runs = [traj for label, traj in runs if label == "start"]
    steps = [traj.steps for traj in main_runs]
    terminals = {label if label != "start" else f"K{traj.K}": traj.terminal for label, traj in runs}
    all_optimum = all(traj.terminal == "optimum" for traj in main_runs)
    faster = all(later < earlier for earlier, later in zip(steps, steps[1:]))
    ordered = list(config.Ks) == sorted(config.Ks)
    diagonal = dict(runs)["diagonal"].terminal
    perturbed = dict(runs)["perturbed"].terminal

    summary: Dict[str, Any] = {f"terminal_{key}": value for key, value in terminals.items()}
    summary.update({f"steps_K{traj.K}": traj.steps for traj in main_runs})
    summary.update({f"y_detour_K{traj.K}": traj.y_detour for traj in main_runs})
    checks = [
        _check("all_reach_optimum", all_optimum),
        _check("diagonal_start_reaches_saddle", diagonal == "saddle", diagonal, "saddle"),
        _check("perturbed_start_breaks_symmetry", perturbed == "optimum", perturbed, "optimum"),
    ]
    if ordered:
        checks.append(_check("steps_decrease_with_K", faster, str(steps)))
    return ExperimentOutcome(summary, checks, ["run", "K", "t", "x", "y", "gx", "gy"], rows)


def _outcome_rows(outcomes) -> List[List[Any]]:
    return [[o.label, o.run, o.terminal.value, o.steps, o.relative_error] for o in outcomes]


def run_noisy_init(config: NoisyInitConfig) -> ExperimentOutcome:
    outcomes = noisy_init_experiment(
        config.K,
        config.d,
        config.noise_levels,
        config.runs,
        _seed(config),
        step=config.step,
        max_steps=config.max_steps,
        tol=config.tol,
        threads=config.threads,
    )
    converged: Dict[str, int] = defaultdict(int)
    for outcome in outcomes:
        converged[outcome.label] += outcome.terminal is Terminal.CONVERGED_TO_TARGET
    summary = {f"converged_noise_{label}": count for label, count in converged.items()}
    summary["runs_per_level"] = config.runs
    checks = []
    if 0.0 in config.noise_levels:
        clean = converged["0"]
        checks.append(_check("noise_free_runs_converge", clean == config.runs, clean, config.runs))
    headers = ["noise", "run", "terminal", "steps", "relative_error"]
    return ExperimentOutcome(summary, checks, headers, _outcome_rows(outcomes))


def run_fixed_top_weights(config: FixedTopWeightsConfig) -> ExperimentOutcome:
    outcomes = fixed_top_weights_experiment(
        config.K,
        config.a_values,
        config.runs,
        _seed(config),
        d=config.d,
        noise=config.noise,
        step=config.step,
        max_steps=config.max_steps,
        tol=config.tol,
        threads=config.threads,
    )
    patterns = [sign_pattern(a) for a in config.a_values]
    converged = [0] * len(patterns)
    steps: List[List[int]] = [[] for _ in patterns]
    for outcome in outcomes:
        index = int(outcome.label)
        steps[index].append(outcome.steps)
        converged[index] += outcome.terminal is Terminal.CONVERGED_TO_TARGET

    summary: Dict[str, Any] = {}
    for index, pattern in enumerate(patterns):
        summary[f"pattern_{index}_signs"] = pattern
        summary[f"pattern_{index}_converged"] = converged[index]
        summary[f"pattern_{index}_mean_steps"] = float(np.mean(steps[index]))

    checks = []
    for index, pattern in enumerate(patterns):
        if pattern == "positive":
            checks.append(_check(f"pattern_{index}_converges", converged[index] == config.runs, converged[index], config.runs))
        else:
            checks.append(_check(f"pattern_{index}_misses_target", converged[index] == 0, converged[index], 0))
    positive = [i for i, p in enumerate(patterns) if p == "positive"]
    for i in positive:
        for j in positive:
            low, high = np.asarray(config.a_values[i]), np.asarray(config.a_values[j])
            if np.all(high >= low) and np.any(high > low):
                faster = np.mean(steps[j]) < np.mean(steps[i])
                checks.append(
                    _check(f"pattern_{j}_faster_than_{i}", faster, float(np.mean(steps[j])), float(np.mean(steps[i])))
                )

    rows = []
    for outcome in outcomes:
        index = int(outcome.label)
        a_text = " ".join(format(v, "g") for v in config.a_values[index])
        rows.append([index, a_text, patterns[index], outcome.run, outcome.terminal.value, outcome.steps, outcome.relative_error])
    headers = ["pattern", "a", "signs", "run", "terminal", "steps", "relative_error"]
    return ExperimentOutcome(summary, checks, headers, rows)


### Multilayer ###


def run_multilayer_check(config: MultilayerCheckConfig) -> ExperimentOutcome:
    """Inflow gradients against finite differences on random nets, plus the depth-1 reduction."""

    rng = _seed(config)
    widths = list(config.widths)

    def _net(index: int) -> List[Any]:
        stream = rng.derive(index)
        generator = stream.generator()
        student = LayeredNet.random(widths, generator)
        teacher = LayeredNet.random(widths, generator)
        batch = gaussian_batch(config.n, widths[0], stream.derive(1))
        keep = kink_distance(student, batch) > config.kink_band
        if not np.any(keep):
            raise DomainError(f"net {index}: every sample lies within the kink band")
        batch = batch.subset(keep)
        gap = relative_gap(gradient_inflow(student, teacher, batch), finite_difference_inflow(student, teacher, batch))

        shallow = LayeredNet.from_layers(student.layers[:1])
        shallow_teacher = LayeredNet.from_layers(teacher.layers[:1])
        inflow_rows = gradient_inflow(shallow, shallow_teacher, batch)[0].T
        direct = empirical_grad(
            batch, WeightSet.from_rows(shallow.layers[0].T), WeightSet.from_rows(shallow_teacher.layers[0].T)
        )
        reduction = relative_gap([inflow_rows], [direct])
        logger.debug("net %d: %d samples kept, gap %.3e, depth-1 gap %.3e", index, batch.n, gap, reduction)
        return [index, batch.n, gap, reduction]

    rows = ordered_map(_net, range(config.nets), threads=config.threads)
    worst = max(row[2] for row in rows)
    worst_reduction = max(row[3] for row in rows)
    summary = {"max_relative_gap": worst, "max_depth1_gap": worst_reduction, "nets": config.nets}
    checks = [
        _check("inflow_matches_finite_differences", worst < config.tolerance, worst, config.tolerance),
        _check("depth1_matches_two_layer_gradient", worst_reduction <= 1e-10, worst_reduction, 1e-10),
    ]
    return ExperimentOutcome(summary, checks, ["net", "samples_kept", "relative_gap", "depth1_gap"], rows)


Runner = Callable[[Any], ExperimentOutcome]

EXPERIMENTS: Dict[str, Runner] = {
    "verify_formula": run_verify_formula,
    "error_vs_angle": run_error_vs_angle,
    "uniform_check": run_uniform_check,
    "scan_l12": run_scan_l12,
    "flow_single": run_flow_single,
    "basin": run_basin,
    "symmetric_field": run_symmetric_field,
    "symmetric_trajectories": run_symmetric_trajectories,
    "noisy_init": run_noisy_init,
    "fixed_top_weights": run_fixed_top_weights,
    "multilayer_check": run_multilayer_check,
}


def experiment_names() -> Sequence[str]:
    return tuple(EXPERIMENTS)


__all__ = [
    "ExperimentOutcome",
    "EXPERIMENTS",
    "experiment_names",
    "emit_vector_field",
    "VECTOR_FIELD_HEADERS",
    "run_verify_formula",
    "run_error_vs_angle",
    "run_uniform_check",
    "run_scan_l12",
    "run_flow_single",
    "run_basin",
    "run_symmetric_field",
    "run_symmetric_trajectories",
    "run_noisy_init",
    "run_fixed_top_weights",
    "run_multilayer_check",
]
