"""Fast per-replication solver: linear prediction, Laguerre rooting, weights.

Instead of a full generalized eigendecomposition, a replication is solved in
three O(n^2) steps: fit the monic linear-prediction polynomial of order
``p_tilde`` by least squares, polish its roots with warm-started Laguerre
iterations, then recover the weights from a (possibly gapped) Vandermonde
least-squares system solved iteratively.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse.linalg

# Laguerre iteration controls.
LAGUERRE_MAX_ITER = 80
LAGUERRE_STEP_TOL = 1e-12
LAGUERRE_RESIDUAL_TOL = 1e-13
DUPLICATE_ROOT_TOL = 1e-9

# Vandermonde weight solve controls.
WEIGHT_SOLVE_TOL = 1e-10
WEIGHT_SOLVE_MAX_ITER = 200

# Break limit cycles with occasional fractional steps, as in the classic
# Laguerre implementations.
_CYCLE_FRACTIONS = (0.5, 0.25, 0.75, 0.13, 0.38, 0.62, 0.88, 1.0)


class LaguerreConvergenceError(RuntimeError):
    """Raised when a warm-started root iteration fails; carries the start index."""

    def __init__(self, index: int, message: str):
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class MonicPolynomial:
    """Polynomial ``sum_k coeffs[k] * z**k`` with leading coefficient one."""

    coeffs: np.ndarray

    def __post_init__(self):
        coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if coeffs.ndim != 1 or coeffs.size < 1:
            raise ValueError("coeffs must be a non-empty vector")
        if not np.all(np.isfinite(coeffs)):
            raise ValueError("coeffs contains non-finite entries")
        if coeffs[-1] != 1.0:
            raise ValueError("leading coefficient must be exactly 1")
        coeffs.flags.writeable = False
        object.__setattr__(self, "coeffs", coeffs)

    @property
    def degree(self) -> int:
        return self.coeffs.size - 1

    def eval_with_derivatives(self, z: complex):
        """Horner evaluation of p(z), p'(z), p''(z)."""
        p = self.coeffs[-1]
        dp = 0.0 + 0.0j
        ddp = 0.0 + 0.0j
        for c in self.coeffs[-2::-1]:
            ddp = ddp * z + 2.0 * dp
            dp = dp * z + p
            p = p * z + c
        return p, dp, ddp

    def deflated(self, root: complex) -> "MonicPolynomial":
        """Synthetic division by ``(z - root)``; stays monic."""
        if self.degree < 1:
            raise ValueError("cannot deflate a constant polynomial")
        out = np.empty(self.degree, dtype=np.complex128)
        acc = self.coeffs[-1]
        for k in range(self.degree - 1, -1, -1):
            out[k] = acc
            acc = self.coeffs[k] + root * acc
        return MonicPolynomial(out)


@dataclass(frozen=True)
class GapSpec:
    """Index layout of gapped data: a segment of length ``segment_length``,
    ``gap`` missing samples, then a second segment of the same length."""

    segment_length: int
    gap: int = 0

    def __post_init__(self):
        if self.segment_length < 1:
            raise ValueError("segment_length must be positive")
        if self.gap < 0:
            raise ValueError("gap must be non-negative")

    def row_powers(self, data_length: int) -> np.ndarray:
        """Sample indices (Vandermonde row powers) covered by the data."""
        if self.gap == 0:
            return np.arange(data_length)
        n, q = self.segment_length, self.gap
        if data_length != 2 * n:
            raise ValueError("gapped data must hold exactly two segments")
        return np.concatenate([np.arange(n), np.arange(n + q, 2 * n + q)])


def linear_prediction(series, p_tilde: int) -> MonicPolynomial:
    """Least-squares monic prediction polynomial of degree ``p_tilde``.

    Minimizes ``||H g + h||_2`` where ``H[k, m] = a_{k+m}`` is the
    ``(n - p_tilde) x p_tilde`` Hankel data matrix and ``h[k] = a_{k+p_tilde}``;
    the returned coefficients are ``[g_0 .. g_{p_tilde-1}, 1]``.
    """
    a = series.samples
    n = a.size
    if p_tilde < 1:
        raise ValueError("p_tilde must be at least 1")
    if n < 2 * p_tilde:
        raise ValueError("insufficient data for order")
    h_mat = scipy.linalg.hankel(a[: n - p_tilde], a[n - p_tilde - 1 : n - 1])
    rhs = a[p_tilde:]
    if not np.any(h_mat):
        raise ValueError("degenerate prediction system")
    g, *_ = scipy.linalg.lstsq(h_mat, -rhs, lapack_driver="gelsy")
    return MonicPolynomial(np.append(g, 1.0 + 0.0j))


def _laguerre_one(poly: MonicPolynomial, start: complex):
    """Laguerre iteration from one starting point; returns (root, iterations)."""
    d = poly.degree
    coeff_norm = np.linalg.norm(poly.coeffs)
    z = complex(start)
    for it in range(1, LAGUERRE_MAX_ITER + 1):
        p, dp, ddp = poly.eval_with_derivatives(z)
        if abs(p) <= LAGUERRE_RESIDUAL_TOL * coeff_norm:
            return z, it - 1
        g = dp / p
        g2 = g * g
        h = g2 - ddp / p
        rad = np.sqrt((d - 1) * (d * h - g2))
        denom_plus = g + rad
        denom_minus = g - rad
        denom = denom_plus if abs(denom_plus) >= abs(denom_minus) else denom_minus
        if denom == 0.0:
            step = (1.0 + abs(z)) * np.exp(1j * it)
        else:
            step = d / denom
        if it % 10 == 0:
            step *= _CYCLE_FRACTIONS[(it // 10) % len(_CYCLE_FRACTIONS)]
        z_next = z - step
        if abs(z_next - z) <= LAGUERRE_STEP_TOL * (1.0 + abs(z_next)):
            return z_next, it
        z = z_next
    raise LaguerreConvergenceError(-1, "Laguerre iteration did not converge")


def laguerre_roots(poly: MonicPolynomial, warm_starts) -> np.ndarray:
    """Polish one root per warm start on the full polynomial.

    Each start is iterated independently.  If two runs from distinct starts
    collapse onto the same root (within DUPLICATE_ROOT_TOL) the later one is
    re-run on the polynomial deflated by the earlier root, so every start
    yields its own root.  Convergence failures raise
    LaguerreConvergenceError with the index of the offending start.
    """
    starts = np.asarray(warm_starts, dtype=np.complex128)
    if starts.size != poly.degree:
        raise ValueError("need exactly one warm start per root")
    roots: list[complex] = []
    for j, start in enumerate(starts):
        work = poly
        deflated_by: set[int] = set()
        try:
            root, _ = _laguerre_one(work, start)
            while work.degree > 1:
                hits = [
                    i
                    for i, r in enumerate(roots)
                    if i not in deflated_by
                    and abs(r - root) < DUPLICATE_ROOT_TOL
                    and abs(starts[i] - start) >= DUPLICATE_ROOT_TOL
                ]
                if not hits:
                    break
                work = work.deflated(roots[hits[0]])
                deflated_by.add(hits[0])
                root, _ = _laguerre_one(work, start)
        except LaguerreConvergenceError as err:
            raise LaguerreConvergenceError(
                j, f"Laguerre iteration failed for warm start {j}"
            ) from err
        roots.append(root)
    return np.asarray(roots, dtype=np.complex128)


def vandermonde_weights(nodes, data, gap: GapSpec) -> np.ndarray:
    """Least-squares weights for known nodes on (possibly gapped) data.

    The system ``V c = a`` with ``V[r, j] = nodes[j]**powers[r]`` is solved
    with the iterative LSQR solver run to relative tolerance WEIGHT_SOLVE_TOL
    or WEIGHT_SOLVE_MAX_ITER iterations.  Columns are equilibrated the same
    way as in the dense fallback so large nodes cannot overflow.
    """
    nodes = np.asarray(nodes, dtype=np.complex128)
    data = np.asarray(data, dtype=np.complex128)
    powers = gap.row_powers(data.size)
    if nodes.size > powers.size:
        raise ValueError("underdetermined weight system")
    mags = np.abs(nodes)
    log_rho = np.log(np.maximum(1.0, mags))
    unit = nodes.copy()
    outside = mags > 1.0
    unit[outside] = nodes[outside] / mags[outside]
    kmax = powers.max()
    vand = np.exp(np.outer(powers - kmax, log_rho)) * unit[np.newaxis, :] ** powers[:, np.newaxis]
    sol = scipy.sparse.linalg.lsqr(
        vand,
        data,
        atol=WEIGHT_SOLVE_TOL,
        btol=WEIGHT_SOLVE_TOL,
        iter_lim=WEIGHT_SOLVE_MAX_ITER,
    )[0]
    return sol * np.exp(-kmax * log_rho)


def fast_ceip(series, warm_starts, p_tilde: int):
    """Full fast-path solve of one replication.

    ``warm_starts`` is the truncated base eigensolution.  Returns an
    ExponentialModel with ``p_tilde`` terms; Laguerre failures propagate so
    the caller can fall back to the accurate path.
    """
    from .model import ExponentialModel

    base_nodes = np.asarray(warm_starts.nodes, dtype=np.complex128)
    if base_nodes.size != p_tilde:
        raise ValueError("warm_starts must hold p_tilde nodes")
    poly = linear_prediction(series, p_tilde)
    roots = laguerre_roots(poly, base_nodes)
    weights = vandermonde_weights(roots, series.samples, GapSpec(series.n, 0))
    return ExponentialModel(weights=weights, nodes=roots)
