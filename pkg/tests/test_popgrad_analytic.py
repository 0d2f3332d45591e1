import math

import numpy as np
import pytest

from Services.errors import DomainError
from Services.geometry import (
    RngSeed,
    WeightSet,
    gaussian_batch,
    orthonormal_teacher,
    random_orthogonal,
    vector_at_angle,
)
from Services.popgrad_analytic import (
    GAUSSIAN_KERNEL,
    IsotropicKernel,
    gradient_rows,
    grad_norms,
    isotropic_pg,
    multi_relu_grad,
    pg_function,
    single_relu_grad,
    weighted_multi_relu_grad,
)
from Services.popgrad_empirical import empirical_grad, empirical_pg, relative_rms_error


def test_pg_aligned_is_half_the_weight():
    w = np.array([2.0, -1.0, 0.5])
    result = pg_function(w / np.linalg.norm(w), w)
    np.testing.assert_allclose(result.vector, w / 2, atol=1e-12)
    assert result.theta == pytest.approx(0.0, abs=1e-12)


def test_pg_opposite_vanishes():
    w = np.array([2.0, -1.0, 0.5])
    result = pg_function(-w / np.linalg.norm(w), w)
    np.testing.assert_allclose(result.vector, 0.0, atol=1e-12)


def test_pg_orthogonal_mass_and_asymmetric_terms():
    w = np.array([3.0, 0.0])
    result = pg_function([0.0, 1.0], w)
    assert result.mass_coeff == pytest.approx(0.25)
    assert result.asym_coeff == pytest.approx(3.0 / (2 * math.pi))
    np.testing.assert_allclose(result.vector, [0.75, 3.0 / (2 * math.pi)], atol=1e-15)


def test_pg_requires_unit_direction_and_nonzero_weight():
    with pytest.raises(DomainError):
        pg_function([2.0, 0.0], [1.0, 1.0])
    with pytest.raises(DomainError):
        pg_function([1.0, 0.0], [0.0, 0.0])


def test_gaussian_kernel_reproduces_pg(generator):
    kernel = GAUSSIAN_KERNEL
    kernel.validate()
    w = generator.standard_normal(6)
    e = vector_at_angle(w, 1.1, generator)
    np.testing.assert_allclose(isotropic_pg(kernel, e, w), pg_function(e, w).vector, atol=1e-15)


def test_kernel_boundary_conditions_are_checked():
    broken = IsotropicKernel(name="broken", A=lambda t: 0.4, B=lambda t: 0.0)
    with pytest.raises(DomainError):
        broken.validate()


def test_gradient_vanishes_at_the_teacher(generator):
    teacher = WeightSet.from_rows(generator.standard_normal((3, 5)))
    np.testing.assert_allclose(multi_relu_grad(teacher, teacher), 0.0, atol=1e-12)
    np.testing.assert_allclose(single_relu_grad(teacher.vectors[0], teacher.vectors[0]), 0.0, atol=1e-12)


def test_single_node_matches_multi_node_formula():
    w = np.array([0.4, 1.3, -0.2])
    w_star = np.array([1.0, 0.0, 0.5])
    multi = multi_relu_grad(WeightSet.from_rows([w]), WeightSet.from_rows([w_star]))
    np.testing.assert_allclose(multi[0], single_relu_grad(w, w_star), atol=1e-14)


def test_weighted_gradient(generator):
    student = WeightSet.from_rows(generator.standard_normal((3, 4)))
    teacher = orthonormal_teacher(3, 4)
    plain = multi_relu_grad(student, teacher)
    np.testing.assert_allclose(weighted_multi_relu_grad(student, teacher, np.ones(3), np.ones(3)), plain, atol=1e-14)
    scaled = weighted_multi_relu_grad(student, teacher, 2 * np.ones(3), 2 * np.ones(3))
    np.testing.assert_allclose(scaled, 4 * plain, atol=1e-13)
    with pytest.raises(DomainError):
        weighted_multi_relu_grad(student, teacher, np.ones(2), np.ones(3))


def test_gradient_is_permutation_equivariant(generator):
    rows = generator.standard_normal((3, 4))
    teacher = generator.standard_normal((3, 4))
    order = [2, 0, 1]
    np.testing.assert_allclose(gradient_rows(rows[order], teacher), gradient_rows(rows, teacher)[order], atol=1e-14)
    np.testing.assert_allclose(gradient_rows(rows, teacher[order]), gradient_rows(rows, teacher), atol=1e-14)


def test_mismatched_sets_are_rejected():
    with pytest.raises(DomainError):
        multi_relu_grad(WeightSet.from_rows(np.ones((2, 3))), WeightSet.from_rows(np.ones((3, 3))))


def test_grad_norms():
    np.testing.assert_allclose(grad_norms(np.array([[3.0, 4.0], [0.0, 1.0]])), [5.0, 1.0])


def test_pg_agrees_with_sampling():
    seed = RngSeed(11)
    generator = seed.generator()
    w = generator.standard_normal(10)
    e = vector_at_angle(w, math.pi / 3, generator)
    batch = gaussian_batch(200_000, 10, seed.derive(1))
    assert relative_rms_error(pg_function(e, w).vector, empirical_pg(batch, e, w)) < 0.05


def test_gradient_agrees_with_sampling():
    student = WeightSet.from_rows([[1.0, 0.2, 0.0, 0.3, 0.0], [-0.4, 1.0, -0.3, 0.0, 0.2]])
    teacher = orthonormal_teacher(2, 5)
    batch = gaussian_batch(200_000, 5, RngSeed(12))
    analytic = multi_relu_grad(student, teacher)
    sampled = empirical_grad(batch, student, teacher)
    assert relative_rms_error(analytic.ravel(), sampled.ravel()) < 0.1


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e4])
def test_pg_is_positively_homogeneous_in_w(scale):
    generator = RngSeed(71).generator()
    for _ in range(20):
        e = generator.standard_normal(6)
        w = generator.standard_normal(6)
        scaled = pg_function(e / np.linalg.norm(e), scale * w)
        base = pg_function(e / np.linalg.norm(e), w)
        np.testing.assert_allclose(scaled.vector, scale * base.vector, rtol=1e-10, atol=1e-12 * scale)
        assert scaled.theta == pytest.approx(base.theta, abs=1e-12)


def test_pg_commutes_with_rotations():
    generator = RngSeed(72).generator()
    for _ in range(20):
        rotation = random_orthogonal(5, generator)
        e = generator.standard_normal(5)
        e /= np.linalg.norm(e)
        w = generator.standard_normal(5)
        rotated = pg_function(rotation @ e, rotation @ w).vector
        np.testing.assert_allclose(rotated, rotation @ pg_function(e, w).vector, atol=1e-12)
