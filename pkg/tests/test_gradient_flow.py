import math

import numpy as np
import pytest

from Services.errors import DomainError
from Services.geometry import RngSeed, WeightSet, angle, orthonormal_teacher
from Services.gradient_flow import (
    Terminal,
    basin_experiment,
    fixed_top_weights_experiment,
    flow,
    lyapunov_form_matrix,
    lyapunov_form_rate,
    lyapunov_value_and_rate,
    match_to_target,
    noisy_init_experiment,
    noisy_start,
    sampling_radius,
    sign_pattern,
    trajectory_rows,
)


def test_flow_converges_near_the_teacher():
    teacher = orthonormal_teacher(2, 2)
    start = WeightSet.from_rows([[0.9, 0.1], [0.05, 1.1]])
    trajectory = flow(start, teacher, record_every=25)
    assert trajectory.terminal is Terminal.CONVERGED_TO_TARGET
    assert trajectory.match.permutation == (0, 1)
    assert trajectory.grad_norms[-1] < 1e-8
    np.testing.assert_allclose(trajectory.final.vectors, teacher.vectors, atol=1e-6)


@pytest.mark.parametrize("method", ["rk4", "euler"])
def test_single_node_flow_decreases_lyapunov(method):
    teacher = WeightSet.from_rows([[1.0, 0.0]])
    trajectory = flow(WeightSet.from_rows([[0.5, 0.8]]), teacher, method=method)
    assert trajectory.terminal is Terminal.CONVERGED_TO_TARGET
    assert np.all(np.diff(trajectory.lyapunov) <= 0.0)


def test_flow_stops_at_max_steps():
    teacher = orthonormal_teacher(2, 2)
    trajectory = flow(WeightSet.from_rows([[0.3, 0.2], [0.1, 0.4]]), teacher, max_steps=3)
    assert trajectory.terminal is Terminal.MAX_STEPS
    assert trajectory.steps == 3
    assert len(trajectory.times) == 4


def test_flow_validates_arguments():
    teacher = orthonormal_teacher(1, 2)
    start = WeightSet.from_rows([[0.5, 0.5]])
    with pytest.raises(DomainError):
        flow(start, teacher, step=0.0)
    with pytest.raises(DomainError):
        flow(start, teacher, method="leapfrog")
    with pytest.raises(DomainError):
        flow(start, orthonormal_teacher(2, 2))


def test_trajectory_rows_layout():
    teacher = WeightSet.from_rows([[1.0, 0.0]])
    trajectory = flow(WeightSet.from_rows([[0.5, 0.8]]), teacher, max_steps=5)
    headers, rows = trajectory_rows(trajectory)
    assert headers == ["t", "w_0_0", "w_0_1", "grad_norm", "V"]
    assert len(rows) == 6
    assert rows[0][:3] == [0.0, 0.5, 0.8]


def test_match_to_target_finds_permutation():
    teacher = np.eye(3)
    match = match_to_target(teacher[[2, 0, 1]], teacher)
    assert match.permutation == (2, 0, 1)
    assert match.matched
    assert match.worst_relative_error == 0.0


def test_lyapunov_rate_matches_quadratic_form():
    generator = RngSeed(14).generator()
    for _ in range(50):
        w_star = generator.standard_normal(4)
        w = w_star + generator.uniform(0.0, 0.95) * np.linalg.norm(w_star) * generator.standard_normal(4) / 2
        theta = angle(w, w_star)
        if theta > math.pi / 2:
            continue
        value, rate = lyapunov_value_and_rate(w, w_star)
        assert value == pytest.approx(0.5 * float((w - w_star) @ (w - w_star)))
        expected = lyapunov_form_rate(theta, float(np.linalg.norm(w)), float(np.linalg.norm(w_star)))
        assert rate == pytest.approx(expected, rel=1e-9, abs=1e-12)
        assert rate < 0


def test_rate_matrix_is_positive_definite():
    for theta in np.linspace(1e-3, math.pi / 2, 1000):
        matrix = lyapunov_form_matrix(float(theta))
        assert np.allclose(matrix, matrix.T)
        assert np.linalg.det(matrix) > 0 and matrix[0, 0] > 0
    with pytest.raises(DomainError):
        lyapunov_form_matrix(2.0)


def test_sampling_radius():
    assert sampling_radius(10, 0.2, 3.0) == pytest.approx(0.2 * math.sqrt(2 * math.pi / 11) * 3.0)
    with pytest.raises(DomainError):
        sampling_radius(10, 0.0, 1.0)
    with pytest.raises(DomainError):
        sampling_radius(10, 1.5, 1.0)


@pytest.mark.slow
def test_basin_experiment_meets_its_bound():
    w_star = np.zeros(5)
    w_star[0] = 1.0
    result = basin_experiment(5, 0.2, w_star, 100, RngSeed(2), max_steps=5000, threads=2)
    assert sum(result.terminals.values()) == 100
    assert result.lower_bound == pytest.approx(0.4)
    assert result.passed
    again = basin_experiment(5, 0.2, w_star, 100, RngSeed(2), max_steps=5000, threads=1)
    assert again.terminals == result.terminals


def test_basin_experiment_needs_enough_trials():
    with pytest.raises(DomainError):
        basin_experiment(3, 0.2, np.ones(3), 10, RngSeed(0))


def test_noisy_start_is_reproducible():
    teacher = orthonormal_teacher(2, 3)
    first = noisy_start(teacher, 0.5, RngSeed(1))
    np.testing.assert_array_equal(first.vectors, noisy_start(teacher, 0.5, RngSeed(1)).vectors)
    np.testing.assert_allclose(noisy_start(teacher, 0.0, RngSeed(1)).vectors, 1e-3 * teacher.vectors)


def test_noise_free_initialization_converges():
    outcomes = noisy_init_experiment(2, 2, [0.0], 2, RngSeed(4))
    assert [o.terminal for o in outcomes] == [Terminal.CONVERGED_TO_TARGET] * 2
    assert {o.label for o in outcomes} == {"0"}


def test_larger_positive_top_weights_converge_faster():
    outcomes = fixed_top_weights_experiment(2, [[1.0, 1.0], [2.0, 2.0]], 2, RngSeed(6), d=4)
    assert all(o.terminal is Terminal.CONVERGED_TO_TARGET for o in outcomes)
    small = [o.steps for o in outcomes if o.label == "0"]
    large = [o.steps for o in outcomes if o.label == "1"]
    assert np.mean(large) < np.mean(small)


def test_sign_pattern():
    assert sign_pattern([1.0, 2.0]) == "positive"
    assert sign_pattern([-1.0, -2.0]) == "negative"
    assert sign_pattern([1.0, -1.0]) == "mixed"


def test_flow_started_at_the_teacher_stops_immediately():
    teacher = orthonormal_teacher(3, 5)
    trajectory = flow(teacher, teacher)
    assert trajectory.terminal is Terminal.CONVERGED_TO_TARGET
    assert trajectory.steps == 0
    assert trajectory.match.worst_relative_error == 0.0
    assert len(trajectory.states) == 1


@pytest.mark.parametrize("seed", [21, 22, 23])
def test_single_node_flow_stays_in_the_teacher_ball(seed):
    generator = RngSeed(seed).generator()
    w_star = generator.standard_normal(5)
    radius = float(np.linalg.norm(w_star))
    offset = generator.standard_normal(5)
    w0 = w_star + 0.95 * radius * offset / np.linalg.norm(offset)
    trajectory = flow(WeightSet.from_rows([w0]), WeightSet.from_rows([w_star]), record_every=1)
    assert trajectory.terminal is Terminal.CONVERGED_TO_TARGET
    distances = [float(np.linalg.norm(state.vectors[0] - w_star)) for state in trajectory.states]
    assert max(distances) <= radius + 1e-12
    assert distances[-1] < 1e-6


def test_match_respects_top_weights():
    teacher = np.eye(2)
    halved = match_to_target(0.5 * teacher, teacher, np.array([2.0, 2.0]), np.ones(2))
    assert halved.matched
    assert halved.worst_relative_error == pytest.approx(0.0, abs=1e-15)
    reflected = np.array([[1.0, 0.0], [0.0, -1.0]])
    flipped = match_to_target(reflected, teacher, np.array([1.0, -1.0]), np.ones(2))
    assert not flipped.matched
    assert flipped.worst_relative_error == math.inf
    same_signs = match_to_target(teacher[[1, 0]], teacher, np.array([-1.0, 1.0]), np.array([1.0, -1.0]))
    assert same_signs.matched
    assert same_signs.permutation == (1, 0)


@pytest.mark.parametrize("pattern", [[1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
def test_non_positive_top_weights_never_reach_the_teacher(pattern):
    outcomes = fixed_top_weights_experiment(2, [pattern], 8, RngSeed(6), d=4, max_steps=3000)
    assert len(outcomes) == 8
    assert [o for o in outcomes if o.terminal is Terminal.CONVERGED_TO_TARGET] == []


def test_mixed_top_weights_leave_the_true_weights():
    teacher = orthonormal_teacher(2, 4)
    trajectory = flow(teacher, teacher, [1.0, -1.0], [1.0, 1.0], max_steps=500)
    # the frozen negative node cannot reproduce its teacher, so W* is not stationary
    assert trajectory.grad_norms[0] == pytest.approx(1.0, rel=1e-9)
    assert trajectory.terminal is not Terminal.CONVERGED_TO_TARGET


def test_fixed_top_weights_validates_dimension():
    with pytest.raises(DomainError):
        fixed_top_weights_experiment(3, [[1.0, 1.0, 1.0]], 1, RngSeed(0), d=2)


@pytest.mark.slow
def test_basin_fraction_in_ten_dimensions():
    w_star = np.zeros(10)
    w_star[0] = 1.0
    result = basin_experiment(10, 0.2, w_star, 2000, RngSeed(9), threads=4)
    assert result.trials == 2000
    assert result.allowance == pytest.approx(3.0 * math.sqrt(0.24 / 2000))
    assert result.fraction >= 0.4 - 3.0 * math.sqrt(0.24 / 2000)
    assert result.passed
