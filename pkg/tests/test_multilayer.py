import numpy as np
import pytest

from Services.errors import DomainError
from Services.geometry import RngSeed, WeightSet, gaussian_batch
from Services.multilayer import (
    LayeredNet,
    finite_difference_inflow,
    forward,
    gradient_inflow,
    inflow,
    kink_distance,
    multilayer_loss,
    relative_gap,
)
from Services.popgrad_empirical import empirical_grad


def _pair(widths, seed):
    generator = RngSeed(seed).generator()
    return LayeredNet.random(widths, generator), LayeredNet.random(widths, generator)


def test_depth_one_reduces_to_two_layer_gradient():
    student, teacher = _pair([5, 3], 1)
    batch = gaussian_batch(400, 5, RngSeed(2))
    (grad,) = gradient_inflow(student, teacher, batch)
    expected = empirical_grad(batch, WeightSet.from_rows(student.layers[0].T), WeightSet.from_rows(teacher.layers[0].T))
    np.testing.assert_allclose(grad.T, expected, atol=1e-12)


@pytest.mark.parametrize("widths", [[4, 3, 2], [3, 4, 3, 2]])
def test_inflow_gradient_matches_finite_differences(widths):
    student, teacher = _pair(widths, 7)
    batch = gaussian_batch(500, widths[0], RngSeed(8))
    batch = batch.subset(kink_distance(student, batch) > 1e-3)
    analytic = gradient_inflow(student, teacher, batch)
    numeric = finite_difference_inflow(student, teacher, batch)
    assert [g.shape for g in analytic] == [layer.shape for layer in student.layers]
    assert relative_gap(analytic, numeric) < 1e-4


def test_inflow_recursion_by_hand():
    net = LayeredNet.from_layers([[[1.0, -1.0], [0.5, 2.0]], [[2.0], [3.0]]])
    passed = forward(net, np.array([[1.0, 1.0]]))
    # first layer pre-activations are 1.5 and 1.0, both active
    np.testing.assert_allclose(passed.outputs[0], [[1.5, 1.0]])
    np.testing.assert_allclose(passed.prediction, [6.0])
    diagonals = inflow(net, passed)
    np.testing.assert_array_equal(diagonals.Q[-1], np.ones((1, 1)))
    np.testing.assert_allclose(diagonals.Q[0], [[2.0, 3.0]])


def test_top_inflow_is_all_ones():
    net, _ = _pair([4, 3, 2], 3)
    batch = gaussian_batch(50, 4, RngSeed(4))
    diagonals = inflow(net, forward(net, batch))
    np.testing.assert_array_equal(diagonals.Q[-1], np.ones((50, 2)))
    assert [q.shape for q in diagonals.Q] == [(50, 3), (50, 2)]


def test_loss_vanishes_for_identical_nets():
    net, _ = _pair([4, 3, 2], 5)
    batch = gaussian_batch(30, 4, RngSeed(6))
    assert multilayer_loss(net, net, batch) == 0.0
    for grad in gradient_inflow(net, net, batch):
        np.testing.assert_array_equal(grad, 0.0)


def test_architecture_checks():
    with pytest.raises(DomainError):
        LayeredNet.from_layers([np.ones((3, 2)), np.ones((3, 1))])
    with pytest.raises(DomainError):
        LayeredNet.from_layers([np.ones(3)])
    with pytest.raises(DomainError):
        LayeredNet.from_layers([])
    student, _ = _pair([4, 3, 2], 1)
    _, other = _pair([4, 2, 2], 1)
    with pytest.raises(DomainError):
        gradient_inflow(student, other, gaussian_batch(10, 4, RngSeed(0)))
    with pytest.raises(DomainError):
        forward(student, np.ones((5, 3)))
