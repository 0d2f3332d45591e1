"""Finite-sample oracle for the analytic formulas.

Gating uses the strict comparison ``x.w > 0``; ties count as off. All sums are
normalized by ``1/n`` to line up with the per-sample analytic values.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from Services.errors import DomainError
from Services.geometry import (
    Distribution,
    Matrix,
    RngSeed,
    SampleBatch,
    Vector,
    WeightSet,
    as_vector,
    check_compatible,
    sample_batch,
    unit,
    vector_at_angle,
)
from Services.popgrad_analytic import pg_function
from Util.parallel import ordered_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class GatingMask:
    bits: np.ndarray

    @property
    def active_fraction(self) -> float:
        return float(np.mean(self.bits))


def _check_dim(X: SampleBatch, *vectors: np.ndarray) -> None:  # noqa: N803
    for vector in vectors:
        if vector.shape[-1] != X.d:
            raise DomainError(f"vector dimension {vector.shape[-1]} does not match batch dimension {X.d}")


def gating(X: SampleBatch, w: Sequence[float] | np.ndarray) -> GatingMask:  # noqa: N803
    w_vec = as_vector(w, name="w")
    _check_dim(X, w_vec)
    return GatingMask(bits=X.data @ w_vec > 0)


def relu_responses(X: SampleBatch, rows: Matrix) -> Matrix:  # noqa: N803
    """``n``-by-``K`` matrix of ``relu(x_l . w_j)``, i.e. ``D(w_j) X w_j``."""

    return np.maximum(X.data @ rows.T, 0.0)


def empirical_pg(
    X: SampleBatch,  # noqa: N803
    e: Sequence[float] | np.ndarray,
    w: Sequence[float] | np.ndarray,
) -> Vector:
    """``(1/n) sum over samples active for both e and w of x (x.w)``."""

    e_vec = as_vector(e, name="e")
    w_vec = as_vector(w, name="w")
    _check_dim(X, e_vec, w_vec)
    projection = X.data @ w_vec
    weights = np.where((X.data @ e_vec > 0) & (projection > 0), projection, 0.0)
    return X.data.T @ weights / X.n


def _weights_or_ones(values: Optional[Sequence[float] | np.ndarray], K: int, name: str) -> Vector:  # noqa: N803
    if values is None:
        return np.ones(K)
    vector = np.asarray(values, dtype=np.float64)
    if vector.shape != (K,):
        raise DomainError(f"{name} must have length {K}, got shape {vector.shape}")
    return vector


def residual(
    X: SampleBatch,  # noqa: N803
    W: Matrix,  # noqa: N803
    W_star: Matrix,  # noqa: N803
    a: Vector,
    a_star: Vector,
) -> Vector:
    """Per-sample output gap ``g2(x; W, a) - g2(x; W*, a*)``."""

    return relu_responses(X, W) @ a - relu_responses(X, W_star) @ a_star


def empirical_grad(
    X: SampleBatch,  # noqa: N803
    W: WeightSet,  # noqa: N803
    W_star: WeightSet,  # noqa: N803
    a: Optional[Sequence[float] | np.ndarray] = None,
    a_star: Optional[Sequence[float] | np.ndarray] = None,
) -> Matrix:
    """Row ``j``: ``a_j [sum_j' a_j' F(e_j, w_j') - sum_k a*_k F(e_j, w*_k)]``.

    ``F`` is ``empirical_pg``; summing its terms over ``j'`` collapses to the
    gated residual ``X^T D(w_j) r / n``, which is how it is evaluated.
    """

    check_compatible(W, W_star)
    _check_dim(X, W.vectors)
    top = _weights_or_ones(a, W.K, "a")
    top_star = _weights_or_ones(a_star, W_star.K, "a_star")
    gap = residual(X, W.vectors, W_star.vectors, top, top_star)
    gates = (X.data @ W.vectors.T > 0).astype(np.float64)
    return top[:, None] * ((gates * gap[:, None]).T @ X.data) / X.n


def empirical_loss(
    X: SampleBatch,  # noqa: N803
    W: Matrix,  # noqa: N803
    W_star: Matrix,  # noqa: N803
    a: Optional[Sequence[float] | np.ndarray] = None,
    a_star: Optional[Sequence[float] | np.ndarray] = None,
) -> float:
    """``(1/n) * 1/2 |g2(X; W*, a*) - g2(X; W, a)|^2`` on raw weight matrices."""

    top = _weights_or_ones(a, W.shape[0], "a")
    top_star = _weights_or_ones(a_star, W_star.shape[0], "a_star")
    gap = residual(X, W, W_star, top, top_star)
    return 0.5 * float(gap @ gap) / X.n


def finite_difference_grad(
    X: SampleBatch,  # noqa: N803
    W: WeightSet,  # noqa: N803
    W_star: WeightSet,  # noqa: N803
    a: Optional[Sequence[float] | np.ndarray] = None,
    a_star: Optional[Sequence[float] | np.ndarray] = None,
) -> Matrix:
    """Central differences of ``empirical_loss`` with ``h = 1e-5 (1 + |w_j|)`` per row."""

    base = np.array(W.vectors, dtype=np.float64)
    grad = np.zeros_like(base)
    for j in range(base.shape[0]):
        h = 1e-5 * (1.0 + float(np.linalg.norm(base[j])))
        for i in range(base.shape[1]):
            plus = base.copy()
            minus = base.copy()
            plus[j, i] += h
            minus[j, i] -= h
            grad[j, i] = (
                empirical_loss(X, plus, W_star.vectors, a, a_star)
                - empirical_loss(X, minus, W_star.vectors, a, a_star)
            ) / (2.0 * h)
    return grad


def kink_distance(X: SampleBatch, rows: Matrix) -> Vector:  # noqa: N803
    """Per sample, the smallest ``|x.w_j| / |x|`` over the given rows."""

    lengths = np.maximum(np.linalg.norm(X.data, axis=1), 1e-300)
    return np.min(np.abs(X.data @ rows.T), axis=1) / lengths


### Error metrics ###


def relative_rms_error(analytic: Sequence[float] | np.ndarray, empirical: Sequence[float] | np.ndarray) -> float:
    """``|analytic - empirical| / |empirical|``."""

    a_vec = as_vector(analytic, name="analytic")
    e_vec = as_vector(empirical, name="empirical")
    if a_vec.shape != e_vec.shape:
        raise DomainError("analytic and empirical values differ in dimension")
    scale = float(np.linalg.norm(e_vec))
    if scale == 0.0:
        raise DomainError("empirical value is zero; relative error undefined")
    return float(np.linalg.norm(a_vec - e_vec)) / scale


def scaled_relative_error(analytic: Sequence[float] | np.ndarray, empirical: Sequence[float] | np.ndarray) -> float:
    """Relative error after the least-squares global rescaling of ``analytic``."""

    a_vec = as_vector(analytic, name="analytic")
    e_vec = as_vector(empirical, name="empirical")
    denom = float(a_vec @ a_vec)
    if denom == 0.0:
        raise DomainError("analytic value is zero; scale undefined")
    return relative_rms_error((float(a_vec @ e_vec) / denom) * a_vec, e_vec)


def direction_angle(u: np.ndarray, v: np.ndarray) -> float:
    cosine = float(unit(u) @ unit(v))
    return math.acos(min(1.0, max(-1.0, cosine)))


### Profiles ###


@dataclass(frozen=True)
class PairInstance:
    e: Vector
    w: Vector
    theta: float


def draw_pair(d: int, theta: float, rng: RngSeed) -> PairInstance:
    """Random ``w`` and a unit ``e`` at exactly ``theta`` from it."""

    generator = rng.generator()
    w = generator.standard_normal(d)
    return PairInstance(e=vector_at_angle(w, theta, generator), w=w, theta=theta)


@dataclass(frozen=True)
class AngleBin:
    theta_lo: float
    theta_hi: float
    mean_err: float
    max_err: float
    pairs: int


def error_vs_angle_profile(
    d: int,
    n: int,
    bins: int,
    rng: RngSeed,
    *,
    pairs_per_bin: int = 50,
    threads: int = 1,
) -> List[AngleBin]:
    """Relative error of ``pg_function`` against ``empirical_pg`` per angle bin of ``[0, pi]``.

    Each pair is evaluated at the centre of its bin on a fresh Gaussian batch.
    """

    if bins < 2:
        raise DomainError("need at least 2 angle bins")
    edges = np.linspace(0.0, math.pi, bins + 1)

    def _run_bin(index: int) -> AngleBin:
        theta = 0.5 * (edges[index] + edges[index + 1])
        stream = rng.derive(index)
        errors = []
        for p in range(pairs_per_bin):
            pair_rng = stream.derive(p)
            pair = draw_pair(d, theta, pair_rng)
            batch = sample_batch("gaussian", n, d, pair_rng.derive(n))
            errors.append(
                relative_rms_error(pg_function(pair.e, pair.w).vector, empirical_pg(batch, pair.e, pair.w))
            )
        logger.debug("angle bin %d (theta=%.3f): mean err %.4f", index, theta, float(np.mean(errors)))
        return AngleBin(
            theta_lo=float(edges[index]),
            theta_hi=float(edges[index + 1]),
            mean_err=float(np.mean(errors)),
            max_err=float(np.max(errors)),
            pairs=pairs_per_bin,
        )

    return ordered_map(_run_bin, range(bins), threads=threads)


@dataclass(frozen=True)
class PairError:
    pair: int
    n: int
    theta: float
    error: float
    angle: float


def error_vs_sample_size(
    d: int,
    sizes: Sequence[int],
    pairs: int,
    rng: RngSeed,
    *,
    theta_max: float = math.pi / 2,
    distribution: Distribution = "gaussian",
    threads: int = 1,
) -> List[PairError]:
    """Per pair and sample size: error of the Gaussian closed form against the sampled value.

    Pairs are fixed across sizes. For the uniform law only the direction is
    comparable, so the error is the scale-free ``scaled_relative_error``.
    """

    def _run_pair(p: int) -> List[PairError]:
        pair_rng = rng.derive(p)
        theta = float(pair_rng.derive(0).generator().uniform(0.0, theta_max))
        pair = draw_pair(d, theta, pair_rng)
        predicted = pg_function(pair.e, pair.w).vector
        rows = []
        for n in sizes:
            batch = sample_batch(distribution, int(n), d, pair_rng.derive(int(n)))
            sampled = empirical_pg(batch, pair.e, pair.w)
            if distribution == "gaussian":
                error = relative_rms_error(predicted, sampled)
            else:
                error = scaled_relative_error(predicted, sampled)
            rows.append(
                PairError(pair=p, n=int(n), theta=theta, error=error, angle=direction_angle(predicted, sampled))
            )
        return rows

    nested = ordered_map(_run_pair, range(pairs), threads=threads)
    return [row for chunk in nested for row in chunk]


__all__ = [
    "GatingMask",
    "gating",
    "relu_responses",
    "empirical_pg",
    "residual",
    "empirical_grad",
    "empirical_loss",
    "finite_difference_grad",
    "kink_distance",
    "relative_rms_error",
    "scaled_relative_error",
    "direction_angle",
    "PairInstance",
    "draw_pair",
    "AngleBin",
    "error_vs_angle_profile",
    "PairError",
    "error_vs_sample_size",
]
