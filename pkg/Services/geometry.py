"""Vectors, angles, orthogonal frames and seeded sampling.

Everything here is a pure function of its inputs. Arrays handed out by
``WeightSet`` and ``SampleBatch`` are marked read-only so the values can be
shared freely between worker threads.

Angles are measured in radians in ``[0, pi]``. They are evaluated with the
half-angle form ``2 * atan2(|u - v|, |u + v|)`` on the normalized inputs, which
is the clamped arccosine of the normalized inner product without its loss of
precision next to 0 and pi.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal, Sequence, Union

import numpy as np
import numpy.typing as npt

from Services.errors import CapabilityError, DomainError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
ArrayLike = Union[Sequence[float], npt.NDArray[np.floating]]
Distribution = Literal["gaussian", "uniform_centered"]

NORM_FLOOR = 1e-12
UNIT_TOLERANCE = 1e-12
RANK_TOLERANCE = 1e-10
_U64 = 2**64


### Vectors and angles ###


def as_vector(values: ArrayLike, *, name: str = "vector") -> Vector:
    """Return ``values`` as a finite 1-D float array with at least one entry."""

    vector = np.asarray(values, dtype=np.float64)
    if vector.ndim != 1 or vector.size < 1:
        raise DomainError(f"{name} must be a non-empty 1-D array, got shape {vector.shape}")
    if not np.all(np.isfinite(vector)):
        raise DomainError(f"{name} has non-finite entries")
    return vector


def unit(values: ArrayLike, *, name: str = "vector") -> Vector:
    """Normalize ``values``; zero-norm input is a domain error."""

    vector = as_vector(values, name=name)
    length = float(np.linalg.norm(vector))
    if length < NORM_FLOOR:
        raise DomainError(f"{name} has norm {length:.3g} below the floor {NORM_FLOOR:g}")
    return vector / length


def as_unit_vector(values: ArrayLike, *, name: str = "e") -> Vector:
    """Validate that ``values`` already has unit length."""

    vector = as_vector(values, name=name)
    if abs(float(np.linalg.norm(vector)) - 1.0) > UNIT_TOLERANCE:
        raise DomainError(f"{name} is not a unit vector")
    return vector


def check_same_dimension(*vectors: np.ndarray) -> int:
    dims = {int(v.shape[-1]) for v in vectors}
    if len(dims) != 1:
        raise DomainError(f"dimension mismatch: {sorted(dims)}")
    return dims.pop()


def _half_angle(u_hat: np.ndarray, v_hat: np.ndarray) -> np.ndarray:
    """Angle between unit vectors along the last axis, broadcasting the rest."""

    chord = np.linalg.norm(u_hat - v_hat, axis=-1)
    span = np.linalg.norm(u_hat + v_hat, axis=-1)
    return 2.0 * np.arctan2(chord, span)


def angle(u: ArrayLike, v: ArrayLike) -> float:
    """Return the angle between ``u`` and ``v`` in ``[0, pi]``."""

    u_vec = as_vector(u, name="u")
    v_vec = as_vector(v, name="v")
    check_same_dimension(u_vec, v_vec)
    return float(_half_angle(unit(u_vec, name="u"), unit(v_vec, name="v")))


def angle_matrix(rows_a: np.ndarray, rows_b: np.ndarray) -> Matrix:
    """Entry ``[i][j]`` is the angle between ``rows_a[i]`` and ``rows_b[j]``."""

    a_hat = rows_a / np.linalg.norm(rows_a, axis=1, keepdims=True)
    b_hat = rows_b / np.linalg.norm(rows_b, axis=1, keepdims=True)
    return _half_angle(a_hat[:, None, :], b_hat[None, :, :])


def wrap_angle(phi: np.ndarray | float) -> np.ndarray:
    """Unsigned angle in ``[0, pi]`` of a planar rotation by ``phi``."""

    return np.abs(np.mod(np.asarray(phi, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi)


### Weight sets ###


@dataclass(frozen=True, eq=False)
class WeightSet:
    """``K`` weight vectors of dimension ``d`` stored as the rows of ``vectors``."""

    vectors: Matrix
    norms: Vector

    @classmethod
    def from_rows(cls, rows: Union[Sequence[ArrayLike], np.ndarray]) -> "WeightSet":
        matrix = np.array(rows, dtype=np.float64)
        if matrix.ndim == 1:
            matrix = matrix[None, :]
        if matrix.ndim != 2 or matrix.shape[0] < 1 or matrix.shape[1] < 1:
            raise DomainError(f"weight set must be a K-by-d matrix, got shape {matrix.shape}")
        if not np.all(np.isfinite(matrix)):
            raise DomainError("weight set has non-finite entries")
        norms = np.linalg.norm(matrix, axis=1)
        if np.any(norms < NORM_FLOOR):
            bad = [int(j) for j in np.flatnonzero(norms < NORM_FLOOR)]
            raise DomainError(f"weight vectors {bad} have norm below the floor {NORM_FLOOR:g}")
        matrix.setflags(write=False)
        norms.setflags(write=False)
        return cls(vectors=matrix, norms=norms)

    @property
    def K(self) -> int:  # noqa: N802 - matches the node-count symbol
        return int(self.vectors.shape[0])

    @property
    def d(self) -> int:
        return int(self.vectors.shape[1])

    @property
    def directions(self) -> Matrix:
        return self.vectors / self.norms[:, None]

    def angles(self) -> Matrix:
        """Self-angle matrix: ``[i][j]`` is the angle between ``w_i`` and ``w_j``."""
        return angle_matrix(self.vectors, self.vectors)

    def transformed(self, rotation: Matrix) -> "WeightSet":
        return WeightSet.from_rows(self.vectors @ rotation.T)

    def flatten(self) -> Vector:
        return self.vectors.reshape(-1).copy()


def check_compatible(student: WeightSet, teacher: WeightSet) -> None:
    if student.K != teacher.K or student.d != teacher.d:
        raise DomainError(
            f"student is {student.K}x{student.d} but teacher is {teacher.K}x{teacher.d}"
        )


def teacher_angles(student: WeightSet, teacher: WeightSet) -> Matrix:
    """Cross-angle matrix: ``[k][j]`` is the angle between ``w*_k`` and ``w_j``."""

    return angle_matrix(teacher.vectors, student.vectors)


def orthonormal_teacher(K: int, d: int) -> WeightSet:  # noqa: N803
    """First ``K`` standard basis vectors of ``R^d``."""

    if d < K:
        raise CapabilityError(f"cannot place {K} orthonormal vectors in dimension {d}")
    return WeightSet.from_rows(np.eye(K, d))


### Orthogonal frames ###


def orthonormalize(basis: np.ndarray) -> Matrix:
    """Modified Gram-Schmidt with one re-orthogonalization pass.

    Rows of the result span the rows of ``basis``. A pivot below
    ``RANK_TOLERANCE`` times the largest pivot marks the basis as rank
    deficient.
    """

    vectors = np.array(basis, dtype=np.float64, ndmin=2)
    pivots = []
    frame = []
    for row in vectors:
        candidate = row.copy()
        for _ in range(2):
            for q in frame:
                candidate -= (q @ candidate) * q
        pivot = float(np.linalg.norm(candidate))
        pivots.append(pivot)
        if pivot == 0.0:
            raise DomainError("basis is rank deficient")
        frame.append(candidate / pivot)
    if min(pivots) < RANK_TOLERANCE * max(pivots):
        raise DomainError("basis is rank deficient")
    return np.array(frame)


def complete_frame(frame: Matrix, d: int) -> Matrix:
    """Extend orthonormal rows ``frame`` to a full ``d``-by-``d`` orthonormal basis."""

    rows = [row for row in frame]
    for axis in np.eye(d):
        if len(rows) == d:
            break
        candidate = axis.copy()
        for _ in range(2):
            for q in rows:
                candidate -= (q @ candidate) * q
        length = float(np.linalg.norm(candidate))
        if length > 1e-8:
            rows.append(candidate / length)
    return np.array(rows)


def rotation_fixing_subspace(basis: np.ndarray, d: int, plane_angle: float) -> Matrix:
    """Orthogonal ``R`` with ``R b = b`` for every ``b`` in ``span(basis)``.

    The first two directions of the orthogonal complement are rotated by
    ``plane_angle``; everything else is left alone.
    """

    rows = np.array(basis, dtype=np.float64, ndmin=2)
    K = rows.shape[0]  # noqa: N806
    if rows.shape[1] != d:
        raise DomainError(f"basis vectors have dimension {rows.shape[1]}, expected {d}")
    if d < K + 2:
        raise CapabilityError(f"need d >= K + 2 for an out-of-plane rotation, got d={d}, K={K}")
    frame = complete_frame(orthonormalize(rows), d)
    u, v = frame[K], frame[K + 1]
    c, s = np.cos(plane_angle), np.sin(plane_angle)
    rotation = (
        np.eye(d)
        + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
        + s * (np.outer(v, u) - np.outer(u, v))
    )
    return rotation


def random_orthogonal(d: int, generator: np.random.Generator) -> Matrix:
    """Haar-distributed orthogonal matrix via QR with sign correction."""

    q, r = np.linalg.qr(generator.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def vector_at_angle(w: ArrayLike, theta: float, generator: np.random.Generator) -> Vector:
    """Unit vector at angle ``theta`` from ``w``: ``cos(theta) w_hat + sin(theta) w_perp``."""

    w_hat = unit(w, name="w")
    if w_hat.size < 2:
        raise CapabilityError("need d >= 2 to build a vector at a prescribed angle")
    while True:
        perp = generator.standard_normal(w_hat.size)
        perp -= (perp @ w_hat) * w_hat
        length = float(np.linalg.norm(perp))
        if length > 1e-8:
            break
    return np.cos(theta) * w_hat + np.sin(theta) * (perp / length)


### Seeded sampling ###


@dataclass(frozen=True)
class RngSeed:
    """Seed plus stream id; identical pairs always produce identical draws."""

    seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for label, value in (("seed", self.seed), ("stream_id", self.stream_id)):
            if not 0 <= int(value) < _U64:
                raise DomainError(f"{label} must be a 64-bit unsigned integer, got {value}")

    def generator(self) -> np.random.Generator:
        sequence = np.random.SeedSequence(int(self.seed), spawn_key=(int(self.stream_id),))
        return np.random.Generator(np.random.Philox(sequence))

    def derive(self, index: int) -> "RngSeed":
        """Child stream for trial ``index``; depends only on (seed, stream_id, index)."""
        digest = hashlib.blake2b(
            f"{self.seed}:{self.stream_id}:{index}".encode("ascii"), digest_size=8
        ).digest()
        return RngSeed(seed=self.seed, stream_id=int.from_bytes(digest, "little"))


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """``n``-by-``d`` input matrix tagged with its law and seed."""

    data: Matrix
    distribution: Distribution
    provenance: RngSeed

    @property
    def n(self) -> int:
        return int(self.data.shape[0])

    @property
    def d(self) -> int:
        return int(self.data.shape[1])

    def subset(self, keep: np.ndarray) -> "SampleBatch":
        data = self.data[keep]
        if data.shape[0] < 1:
            raise DomainError("subset would leave an empty batch")
        data.setflags(write=False)
        return SampleBatch(data=data, distribution=self.distribution, provenance=self.provenance)


def _check_size(n: int, d: int) -> None:
    if n < 1 or d < 1:
        raise DomainError(f"batch needs n >= 1 and d >= 1, got n={n}, d={d}")


def gaussian_batch(n: int, d: int, rng: RngSeed) -> SampleBatch:
    _check_size(n, d)
    data = rng.generator().standard_normal((n, d))
    data.setflags(write=False)
    return SampleBatch(data=data, distribution="gaussian", provenance=rng)


def uniform_centered_batch(n: int, d: int, rng: RngSeed) -> SampleBatch:
    _check_size(n, d)
    data = rng.generator().uniform(-0.5, 0.5, size=(n, d))
    data.setflags(write=False)
    return SampleBatch(data=data, distribution="uniform_centered", provenance=rng)


def sample_batch(distribution: Distribution, n: int, d: int, rng: RngSeed) -> SampleBatch:
    if distribution == "gaussian":
        return gaussian_batch(n, d, rng)
    if distribution == "uniform_centered":
        return uniform_centered_batch(n, d, rng)
    raise DomainError(f"unknown distribution {distribution!r}")


def uniform_ball(count: int, d: int, radius: float, generator: np.random.Generator) -> Matrix:
    """``count`` points uniform in the centered ``d``-ball: Gaussian direction times ``radius * U^(1/d)``."""

    directions = generator.standard_normal((count, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = radius * generator.uniform(size=count) ** (1.0 / d)
    return directions * radii[:, None]


__all__ = [
    "Vector",
    "Matrix",
    "Distribution",
    "NORM_FLOOR",
    "as_vector",
    "unit",
    "as_unit_vector",
    "angle",
    "angle_matrix",
    "wrap_angle",
    "WeightSet",
    "check_compatible",
    "teacher_angles",
    "orthonormal_teacher",
    "orthonormalize",
    "complete_frame",
    "rotation_fixing_subspace",
    "random_orthogonal",
    "vector_at_angle",
    "RngSeed",
    "SampleBatch",
    "gaussian_batch",
    "uniform_centered_batch",
    "sample_batch",
    "uniform_ball",
]
