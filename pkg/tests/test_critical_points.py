import math

import numpy as np
import pytest

from Services.critical_points import (
    L_function,
    assemble_normal_system,
    collinear_saddle_k2,
    cone_membership_2d,
    grad_norm_residual,
    h,
    l12_closed_form,
    normal_equation_residual,
    orbit_invariance_check,
    scan_conjecture_2d,
    screen_k2,
    solve_reduced_magnitudes,
)
from Services.errors import CapabilityError, DomainError, SingularSystemError
from Services.geometry import RngSeed, WeightSet, orthonormal_teacher, random_orthogonal
from Services.popgrad_analytic import multi_relu_grad


def test_h_endpoints_and_domain():
    assert h(0.0) == pytest.approx(math.pi)
    assert h(math.pi) == pytest.approx(0.0, abs=1e-15)
    values = h(np.linspace(0.0, math.pi, 50))
    assert np.all(np.diff(values) < 0)
    with pytest.raises(DomainError):
        h(-0.1)
    with pytest.raises(DomainError):
        h(4.0)


def test_normal_system_at_the_orthonormal_optimum():
    teacher = orthonormal_teacher(2, 2)
    system = assemble_normal_system(teacher, teacher)
    expected = np.array([[math.pi, 1.0], [0.0, math.pi / 2], [math.pi / 2, 0.0], [1.0, math.pi]])
    np.testing.assert_allclose(system.M, expected, atol=1e-12)
    np.testing.assert_allclose(system.M_star, expected, atol=1e-12)
    solution = solve_reduced_magnitudes(system, teacher.norms)
    assert solution.admissible
    np.testing.assert_allclose(solution.magnitudes, [1.0, 1.0], atol=1e-12)


def test_normal_residual_is_projected_gradient():
    generator = RngSeed(3).generator()
    student = WeightSet.from_rows(generator.standard_normal((3, 5)))
    teacher = WeightSet.from_rows(generator.standard_normal((3, 5)))
    system = assemble_normal_system(student, teacher)
    residual = normal_equation_residual(system, student.norms, teacher.norms)
    grad = multi_relu_grad(student, teacher)
    projected = 2 * math.pi * grad @ student.directions.T
    np.testing.assert_allclose(residual, projected.ravel(), atol=1e-10)


def test_reduced_system_rejects_bad_magnitudes():
    teacher = orthonormal_teacher(2, 2)
    system = assemble_normal_system(teacher, teacher)
    with pytest.raises(DomainError):
        solve_reduced_magnitudes(system, [1.0, -1.0])


def test_grad_norm_residual_vanishes_at_optimum():
    teacher = orthonormal_teacher(3, 3)
    assert grad_norm_residual(teacher, teacher) < 1e-12


@pytest.mark.parametrize(
    "theta12, phi",
    [(math.pi / 2, math.pi), (math.pi / 2, math.pi / 4), (1.0, 2.5), (2.2, -0.7), (0.4, 4.0)],
)
def test_l_function_matches_planar_closed_form(theta12, phi):
    e1 = np.array([1.0, 0.0])
    e2 = np.array([math.cos(theta12), math.sin(theta12)])
    e_star = np.array([math.cos(phi), math.sin(phi)])
    generic = L_function(0, 1, e_star, np.stack([e1, e2]))
    assert generic == pytest.approx(l12_closed_form(theta12, phi), abs=1e-10)


def test_l_function_signs_inside_and_outside_the_cone():
    directions = np.eye(2)
    inside = np.array([1.0, 1.0]) / math.sqrt(2)
    assert L_function(0, 1, inside, directions) > 0
    assert L_function(1, 0, inside, directions) > 0
    assert L_function(0, 1, -inside, directions) < 0
    assert L_function(1, 0, -inside, directions) < 0


def test_cone_membership():
    e1, e2 = [1.0, 0.0], [0.0, 1.0]
    assert cone_membership_2d([1.0, 1.0], e1, e2).label == "interior"
    assert cone_membership_2d([-1.0, 0.1], e1, e2).label == "exterior"
    assert cone_membership_2d(e1, e1, e2).label == "boundary"
    with pytest.raises(DomainError):
        cone_membership_2d([1.0, 1.0], e1, [-2.0, 0.0])


def test_small_scan_finds_no_counterexamples():
    report = scan_conjecture_2d(48, 40, csv_stride=8)
    assert report.passed
    assert report.singular_rows == 0
    assert report.checked_cells + report.boundary_cells == 48 * 40
    assert report.worst_margin > 0
    assert len(report.rows) == (40 // 8) * (48 // 8)
    assert scan_conjecture_2d(48, 40, csv_stride=8, threads=4).rows == report.rows


def test_scan_rejects_tiny_grids():
    with pytest.raises(DomainError):
        scan_conjecture_2d(5, 50)


def test_screening_keeps_the_optimum():
    teacher = orthonormal_teacher(2, 2)
    result = screen_k2(np.eye(2), teacher)
    assert not result.ruled_out
    assert result.solution.admissible
    assert result.residual < 1e-10


@pytest.mark.parametrize("split", [0.1, 0.3, 0.5, 0.9])
def test_collinear_saddle_equal_norms(split):
    w1, w2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    saddle = collinear_saddle_k2(w1, w2, split)
    teacher = WeightSet.from_rows([w1, w2])
    assert grad_norm_residual(saddle, teacher) < 1e-8
    assert float(np.sum(saddle.norms)) == pytest.approx(2 * h(math.pi / 4) / math.pi, abs=1e-12)
    assert saddle.angles()[0, 1] == pytest.approx(0.0, abs=1e-7)


def test_collinear_saddle_unequal_norms():
    generator = RngSeed(21).generator()
    for _ in range(10):
        w1, w2 = generator.standard_normal((2, 4))
        w2 = 2.5 * w2
        saddle = collinear_saddle_k2(w1, w2, float(generator.uniform(0.05, 0.95)))
        assert grad_norm_residual(saddle, WeightSet.from_rows([w1, w2])) < 1e-8


def test_collinear_saddle_rejects_bad_input():
    with pytest.raises(DomainError):
        collinear_saddle_k2([1.0, 0.0], [0.0, 1.0], 1.0)
    with pytest.raises(DomainError):
        collinear_saddle_k2([1.0, 0.0], [2.0, 0.0], 0.5)


def test_orbit_invariance():
    generator = RngSeed(5).generator()
    for _ in range(20):
        student = WeightSet.from_rows(generator.standard_normal((2, 5)))
        teacher = WeightSet.from_rows(generator.standard_normal((2, 5)))
        check = orbit_invariance_check(student, teacher, float(generator.uniform(0, 2 * math.pi)))
        assert check.gap < 1e-10
    with pytest.raises(CapabilityError):
        orbit_invariance_check(orthonormal_teacher(2, 3), orthonormal_teacher(2, 3), 0.3)


def test_screening_rules_out_directions_away_from_the_teacher():
    directions = np.array([[-1.0, 0.0], [math.cos(3.6), math.sin(3.6)]])
    result = screen_k2(directions, orthonormal_teacher(2, 2))
    assert result.ruled_out
    assert all(v < 0 for v in result.l12)


def _directions(K, d, seed):
    generator = RngSeed(seed).generator()
    rows = generator.standard_normal((K, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


@pytest.mark.parametrize("l", [0, 1, 2])
def test_l_function_vanishes_on_student_directions(l):
    E = _directions(3, 5, 61)
    for j in range(3):
        for j_prime in range(3):
            assert L_function(j, j_prime, E[l], E) == pytest.approx(0.0, abs=1e-10)


def test_l_function_diagonal_is_zero_everywhere():
    E = _directions(3, 4, 62)
    generator = RngSeed(63).generator()
    for _ in range(20):
        e_star = generator.standard_normal(4)
        for j in range(3):
            assert L_function(j, j, e_star, E) == pytest.approx(0.0, abs=1e-10)


def test_reduced_solve_reports_collapsed_nodes_as_singular():
    student = WeightSet.from_rows([[1.0, 0.0], [2.0, 0.0]])
    system = assemble_normal_system(student, orthonormal_teacher(2, 2))
    solution = solve_reduced_magnitudes(system, [1.0, 1.0])
    assert solution.singular
    assert solution.magnitudes is None
    assert not solution.admissible
    with pytest.raises(SingularSystemError):
        L_function(0, 1, [0.0, 1.0], student.vectors)


def test_normal_system_is_rotation_invariant():
    generator = RngSeed(64).generator()
    student = WeightSet.from_rows(generator.standard_normal((3, 5)))
    teacher = WeightSet.from_rows(generator.standard_normal((3, 5)))
    rotation = random_orthogonal(5, generator)
    rotated = assemble_normal_system(
        WeightSet.from_rows(student.vectors @ rotation.T), WeightSet.from_rows(teacher.vectors @ rotation.T)
    )
    original = assemble_normal_system(student, teacher)
    for name in ("M", "M_star", "Mr", "Mr_star", "Theta", "Theta_star"):
        np.testing.assert_allclose(getattr(rotated, name), getattr(original, name), atol=1e-10)
