"""Finite-sample gradients of deep ReLU teacher-student networks via gradient inflow.

A ``LayeredNet`` holds weight matrices from the bottom up, each shaped
``fan_in x fan_out``. The network output is the plain sum of the top hidden
layer's ReLU responses, so depth 1 is the two-layer model with unit top
weights. Diagonal gating and inflow matrices are kept as ``n``-by-width
arrays; the input fed to layer ``c`` is the ReLU output of layer ``c - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from Services.errors import DomainError
from Services.geometry import Matrix, SampleBatch

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LayeredNet:
    layers: Tuple[Matrix, ...]

    @classmethod
    def from_layers(cls, layers: Sequence[np.ndarray]) -> "LayeredNet":
        mats = tuple(np.array(layer, dtype=np.float64) for layer in layers)
        if not mats:
            raise DomainError("a network needs at least one layer")
        for index, mat in enumerate(mats):
            if mat.ndim != 2 or not np.all(np.isfinite(mat)):
                raise DomainError(f"layer {index} must be a finite 2-D matrix")
            if index and mats[index - 1].shape[1] != mat.shape[0]:
                raise DomainError(
                    f"layer {index} expects {mat.shape[0]} inputs but layer {index - 1} has {mats[index - 1].shape[1]} nodes"
                )
        for mat in mats:
            mat.setflags(write=False)
        return cls(layers=mats)

    @classmethod
    def random(cls, widths: Sequence[int], generator: np.random.Generator) -> "LayeredNet":
        """Gaussian weights scaled by ``1/sqrt(fan_in)``; ``widths`` starts with the input dimension."""
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise DomainError("widths need an input size and at least one layer, all positive")
        return cls.from_layers(
            [generator.standard_normal((a, b)) / np.sqrt(a) for a, b in zip(widths[:-1], widths[1:])]
        )

    @property
    def widths(self) -> Tuple[int, ...]:
        return (self.layers[0].shape[0],) + tuple(layer.shape[1] for layer in self.layers)

    def replace(self, index: int, layer: np.ndarray) -> "LayeredNet":
        mats = list(self.layers)
        mats[index] = layer
        return LayeredNet.from_layers(mats)


@dataclass(frozen=True, eq=False)
class ForwardPass:
    """``inputs[c]`` feeds layer ``c``; ``gates[c]`` and ``outputs[c]`` are its masks and ReLU responses."""

    inputs: List[Matrix]
    gates: List[np.ndarray]
    outputs: List[Matrix]

    @property
    def prediction(self) -> np.ndarray:
        return self.outputs[-1].sum(axis=1)


@dataclass(frozen=True, eq=False)
class NodeDiagonals:
    """Per layer: gating ``D`` (bool) and inflow ``Q`` (float), both ``n``-by-width."""

    D: List[np.ndarray]  # noqa: N815
    Q: List[Matrix]  # noqa: N815


def forward(net: LayeredNet, X: SampleBatch | np.ndarray) -> ForwardPass:  # noqa: N803
    data = X.data if isinstance(X, SampleBatch) else np.asarray(X, dtype=np.float64)
    if data.ndim != 2 or data.shape[1] != net.widths[0]:
        raise DomainError(f"inputs have shape {data.shape}, network expects {net.widths[0]} features")
    inputs, gates, outputs = [], [], []
    current = data
    for layer in net.layers:
        inputs.append(current)
        pre = current @ layer
        mask = pre > 0
        current = np.where(mask, pre, 0.0)
        gates.append(mask)
        outputs.append(current)
    return ForwardPass(inputs=inputs, gates=gates, outputs=outputs)


def inflow(net: LayeredNet, passed: ForwardPass) -> NodeDiagonals:
    """Top-down recursion ``Q_k = sum_j w_jk D_j Q_j`` with ``Q = 1`` at the top layer."""

    n = passed.inputs[0].shape[0]
    depth = len(net.layers)
    q: List[Matrix] = [np.empty(0)] * depth
    q[-1] = np.ones((n, net.widths[-1]))
    for c in range(depth - 1, 0, -1):
        q[c - 1] = (passed.gates[c] * q[c]) @ net.layers[c].T
    return NodeDiagonals(D=list(passed.gates), Q=q)


def _check_architecture(student: LayeredNet, teacher: LayeredNet) -> None:
    if student.widths != teacher.widths:
        raise DomainError(f"student widths {student.widths} differ from teacher widths {teacher.widths}")


def gradient_inflow(student: LayeredNet, teacher: LayeredNet, X: SampleBatch | np.ndarray) -> List[Matrix]:  # noqa: N803
    """Gradient of ``(1/n) * 1/2 |g - g*|^2`` for every student layer.

    Column ``j`` of layer ``c`` is ``X_c^T D_j Q_j sum_j' (Q_j' u_j' - Q*_j' u*_j') / n``.
    """

    _check_architecture(student, teacher)
    own = forward(student, X)
    ref = forward(teacher, X)
    own_diag = inflow(student, own)
    ref_diag = inflow(teacher, ref)
    n = own.inputs[0].shape[0]
    grads = []
    for c in range(len(student.layers)):
        gap = (own_diag.Q[c] * own.outputs[c]).sum(axis=1) - (ref_diag.Q[c] * ref.outputs[c]).sum(axis=1)
        carried = own_diag.D[c] * own_diag.Q[c] * gap[:, None]
        grads.append(own.inputs[c].T @ carried / n)
    return grads


def multilayer_loss(student: LayeredNet, teacher: LayeredNet, X: SampleBatch | np.ndarray) -> float:  # noqa: N803
    gap = forward(student, X).prediction - forward(teacher, X).prediction
    return 0.5 * float(gap @ gap) / gap.size


def finite_difference_inflow(
    student: LayeredNet,
    teacher: LayeredNet,
    X: SampleBatch | np.ndarray,  # noqa: N803
    *,
    h: float = 1e-5,
) -> List[Matrix]:
    """Central differences of ``multilayer_loss`` with the batch held fixed."""

    logger.debug("finite differences over %d weights", sum(layer.size for layer in student.layers))
    grads = []
    for c, layer in enumerate(student.layers):
        grad = np.zeros_like(layer)
        for index in np.ndindex(layer.shape):
            plus = np.array(layer)
            minus = np.array(layer)
            plus[index] += h
            minus[index] -= h
            grad[index] = (
                multilayer_loss(student.replace(c, plus), teacher, X)
                - multilayer_loss(student.replace(c, minus), teacher, X)
            ) / (2.0 * h)
        grads.append(grad)
    return grads


def kink_distance(net: LayeredNet, X: SampleBatch | np.ndarray) -> np.ndarray:  # noqa: N803
    """Per sample, the smallest absolute pre-activation over every node."""

    passed = forward(net, X)
    closest = np.full(passed.inputs[0].shape[0], np.inf)
    for c, layer in enumerate(net.layers):
        closest = np.minimum(closest, np.min(np.abs(passed.inputs[c] @ layer), axis=1))
    return closest


def relative_gap(left: Sequence[np.ndarray], right: Sequence[np.ndarray]) -> float:
    """``|left - right| / |right|`` over all layers stacked."""

    diff = np.concatenate([(a - b).ravel() for a, b in zip(left, right)])
    scale = np.concatenate([b.ravel() for b in right])
    return float(np.linalg.norm(diff) / max(np.linalg.norm(scale), 1e-300))


__all__ = [
    "LayeredNet",
    "ForwardPass",
    "NodeDiagonals",
    "forward",
    "inflow",
    "gradient_inflow",
    "multilayer_loss",
    "finite_difference_inflow",
    "kink_distance",
    "relative_gap",
]
