import math

import numpy as np
import pytest

from Services.errors import DomainError
from Services.geometry import RngSeed, SampleBatch, WeightSet, gaussian_batch, uniform_centered_batch
from Services.popgrad_empirical import (
    direction_angle,
    empirical_grad,
    empirical_loss,
    empirical_pg,
    error_vs_angle_profile,
    error_vs_sample_size,
    finite_difference_grad,
    gating,
    kink_distance,
    relative_rms_error,
    scaled_relative_error,
)


def _batch(rows):
    data = np.array(rows, dtype=np.float64)
    data.setflags(write=False)
    return SampleBatch(data=data, distribution="gaussian", provenance=RngSeed(0))


def test_gating_is_strict():
    batch = _batch([[1.0, 0.0], [0.0, 1.0], [-1.0, 2.0]])
    mask = gating(batch, [1.0, 0.0])
    assert mask.bits.tolist() == [True, False, False]
    assert mask.active_fraction == pytest.approx(1 / 3)


def test_empirical_pg_by_hand():
    batch = _batch([[1.0, 1.0], [2.0, -1.0], [-1.0, 1.0], [1.0, -3.0]])
    e = np.array([1.0, 0.0])
    w = np.array([1.0, 1.0])
    # rows 0 and 1 are active for both; x.w = 2 and 1
    expected = (2.0 * np.array([1.0, 1.0]) + 1.0 * np.array([2.0, -1.0])) / 4
    np.testing.assert_allclose(empirical_pg(batch, e, w), expected)


def _smooth_batch(n, d, rows, seed):
    batch = gaussian_batch(n, d, RngSeed(seed))
    return batch.subset(kink_distance(batch, rows) > 1e-3)


@pytest.mark.parametrize("K", [1, 2, 3])
def test_empirical_grad_matches_finite_differences(K):
    generator = RngSeed(40 + K).generator()
    student = WeightSet.from_rows(generator.standard_normal((K, 4)))
    teacher = WeightSet.from_rows(generator.standard_normal((K, 4)))
    batch = _smooth_batch(2000, 4, student.vectors, 50 + K)
    analytic = empirical_grad(batch, student, teacher)
    numeric = finite_difference_grad(batch, student, teacher)
    assert relative_rms_error(analytic.ravel(), numeric.ravel()) < 1e-6


def test_weighted_empirical_grad_matches_finite_differences():
    generator = RngSeed(60).generator()
    student = WeightSet.from_rows(generator.standard_normal((2, 3)))
    teacher = WeightSet.from_rows(generator.standard_normal((2, 3)))
    a, a_star = np.array([1.5, -0.5]), np.array([1.0, 2.0])
    batch = _smooth_batch(1000, 3, student.vectors, 61)
    analytic = empirical_grad(batch, student, teacher, a, a_star)
    numeric = finite_difference_grad(batch, student, teacher, a, a_star)
    assert relative_rms_error(analytic.ravel(), numeric.ravel()) < 1e-6


def test_loss_vanishes_at_the_teacher(rng):
    teacher = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert empirical_loss(gaussian_batch(100, 2, rng), teacher, teacher) == 0.0


def test_error_metrics():
    assert relative_rms_error([1.0, 1.0], [1.0, 0.0]) == pytest.approx(1.0)
    assert scaled_relative_error([3.0, 6.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert direction_angle(np.array([1.0, 0.0]), np.array([0.0, 2.0])) == pytest.approx(math.pi / 2)
    with pytest.raises(DomainError):
        relative_rms_error([1.0, 0.0], [0.0, 0.0])


def test_error_vs_angle_profile_is_deterministic_across_threads():
    seed = RngSeed(8)
    serial = error_vs_angle_profile(10, 2000, 4, seed, pairs_per_bin=3, threads=1)
    parallel = error_vs_angle_profile(10, 2000, 4, seed, pairs_per_bin=3, threads=3)
    assert serial == parallel
    assert len(serial) == 4
    assert serial[0].theta_lo == 0.0 and serial[-1].theta_hi == pytest.approx(math.pi)
    assert all(b.mean_err >= 0 and b.max_err >= b.mean_err for b in serial)


def test_error_vs_angle_needs_two_bins():
    with pytest.raises(DomainError):
        error_vs_angle_profile(5, 100, 1, RngSeed(0))


def test_error_vs_sample_size_keeps_pairs_fixed():
    records = error_vs_sample_size(8, [200, 2000], 3, RngSeed(9), theta_max=1.0)
    assert [r.n for r in records] == [200, 2000] * 3
    for p in range(3):
        thetas = {r.theta for r in records if r.pair == p}
        assert len(thetas) == 1
        assert 0.0 <= thetas.pop() <= 1.0


@pytest.mark.parametrize("scale", [1e-6, 0.3, 250.0])
def test_gating_ignores_positive_scale(scale):
    batch = gaussian_batch(500, 4, RngSeed(81))
    w = np.array([0.4, -1.2, 0.7, 0.1])
    assert np.array_equal(gating(batch, scale * w).bits, gating(batch, w).bits)


def test_gating_opens_half_the_gaussian_inputs():
    batch = gaussian_batch(20000, 5, RngSeed(82))
    mask = gating(batch, [1.0, -2.0, 0.5, 0.0, 3.0])
    assert mask.bits.shape == (20000,)
    assert mask.active_fraction == pytest.approx(0.5, abs=0.02)


def test_gaussian_batch_moments():
    batch = gaussian_batch(50000, 3, RngSeed(83))
    assert batch.distribution == "gaussian"
    np.testing.assert_allclose(batch.data.mean(axis=0), 0.0, atol=0.02)
    np.testing.assert_allclose(batch.data.var(axis=0), 1.0, atol=0.03)


def test_uniform_centered_batch_moments():
    batch = uniform_centered_batch(50000, 3, RngSeed(84))
    assert batch.distribution == "uniform_centered"
    assert batch.data.min() >= -0.5 and batch.data.max() <= 0.5
    np.testing.assert_allclose(batch.data.mean(axis=0), 0.0, atol=0.01)
    np.testing.assert_allclose(batch.data.var(axis=0), 1.0 / 12.0, atol=0.003)
