"""Core data model: sampled complex signals and finite exponential mixtures.

A signal of length ``n`` is a vector of complex samples ``a_0 .. a_{n-1}``
together with the known standard deviation ``sigma`` of the additive complex
Gaussian noise (``E|nu|^2 = sigma**2``, i.e. each real component has variance
``sigma**2 / 2``) and the sampling step ``dt``.  An exponential model is a
finite sum ``sum_j c_j * xi_j**k`` with complex weights ``c_j`` and pairwise
distinct complex nodes ``xi_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Relative distance below which two nodes are considered the same term.
NODE_MERGE_TOL = 1e-8


def _as_complex_vector(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.complex128)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be one-dimensional")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


@dataclass(frozen=True)
class SignalSeries:
    """Uniformly sampled complex signal with known noise level."""

    samples: np.ndarray
    sigma: float = 0.0
    dt: float = 1.0

    def __post_init__(self):
        samples = _as_complex_vector(self.samples, "samples")
        if samples.size < 2:
            raise ValueError("series needs at least two samples")
        if not (np.isfinite(self.sigma) and self.sigma >= 0.0):
            raise ValueError("sigma must be finite and non-negative")
        if not (np.isfinite(self.dt) and self.dt > 0.0):
            raise ValueError("dt must be finite and positive")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)

    @property
    def n(self) -> int:
        return self.samples.size


def _merge_coincident(weights: np.ndarray, nodes: np.ndarray):
    """Sum the weights of nodes closer than NODE_MERGE_TOL (relative)."""
    kept_w: list[complex] = []
    kept_x: list[complex] = []
    for c, x in zip(weights, nodes):
        for i, xk in enumerate(kept_x):
            if abs(x - xk) <= NODE_MERGE_TOL * max(1.0, abs(x), abs(xk)):
                kept_w[i] += c
                break
        else:
            kept_w.append(c)
            kept_x.append(x)
    return np.array(kept_w, dtype=np.complex128), np.array(kept_x, dtype=np.complex128)


@dataclass(frozen=True)
class ExponentialModel:
    """Finite mixture ``a_k = sum_j weights[j] * nodes[j]**k``.

    Nodes are kept pairwise distinct: terms whose nodes coincide within
    NODE_MERGE_TOL (relative) are merged at construction by summing their
    weights.  The empty model (order zero) evaluates to the zero signal.
    """

    weights: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.complex128))
    nodes: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.complex128))

    def __post_init__(self):
        weights = _as_complex_vector(self.weights, "weights")
        nodes = _as_complex_vector(self.nodes, "nodes")
        if weights.size != nodes.size:
            raise ValueError("weights and nodes must have equal length")
        if nodes.size > 1:
            weights, nodes = _merge_coincident(weights, nodes)
        weights.flags.writeable = False
        nodes.flags.writeable = False
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "nodes", nodes)

    @property
    def order(self) -> int:
        return self.nodes.size

    @property
    def terms(self) -> list[tuple[complex, complex]]:
        return [(complex(c), complex(x)) for c, x in zip(self.weights, self.nodes)]

    @classmethod
    def from_terms(cls, terms) -> "ExponentialModel":
        weights = [c for c, _ in terms]
        nodes = [x for _, x in terms]
        return cls(np.asarray(weights, dtype=np.complex128), np.asarray(nodes, dtype=np.complex128))


@dataclass(frozen=True)
class ResidualReport:
    """Pointwise residuals of a model fit plus summary statistics.

    ``exceed_count`` counts residuals strictly larger in modulus than the
    series noise level; ``mse`` is the mean squared residual modulus.
    """

    residuals: np.ndarray
    exceed_count: int
    mse: float


def evaluate_model(model: ExponentialModel, k_range) -> np.ndarray:
    """Evaluate ``a_k = sum_j c_j xi_j**k`` on a range of integer indices.

    ``k_range`` may be a ``range`` or any sequence of non-negative integers.
    Evaluation is linear in the weights and an empty model yields zeros.
    """
    ks = np.asarray(list(k_range) if isinstance(k_range, range) else k_range)
    if ks.size == 0:
        raise ValueError("k_range must be non-empty")
    if not np.issubdtype(ks.dtype, np.integer):
        raise ValueError("k_range must contain integers")
    if np.any(ks < 0):
        raise ValueError("k_range must be non-negative")
    if model.order == 0:
        return np.zeros(ks.size, dtype=np.complex128)
    # (#ks, order) power table; sums are over terms.
    powers = model.nodes[np.newaxis, :] ** ks[:, np.newaxis]
    return powers @ model.weights


def residual_report(series: SignalSeries, model: ExponentialModel) -> ResidualReport:
    """Residuals ``a_k - sum_j c_j xi_j**k`` over the full index range of the series."""
    predicted = evaluate_model(model, range(series.n))
    residuals = series.samples - predicted
    exceed = int(np.count_nonzero(np.abs(residuals) > series.sigma))
    mse = float(np.mean(np.abs(residuals) ** 2))
    residuals.flags.writeable = False
    return ResidualReport(residuals=residuals, exceed_count=exceed, mse=mse)
