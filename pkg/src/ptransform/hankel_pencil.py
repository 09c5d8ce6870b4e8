"""Square Hankel pencil built from a sampled signal and its eigendecomposition.

For an even-length series ``a_0 .. a_{n-1}`` the two ``n/2 x n/2`` Hankel
matrices ``U0[i, j] = a_{i+j}`` and ``U1[i, j] = a_{i+j+1}`` form a linear
pencil ``U1 - z*U0``.  When the data follow an exponential model of order
``p = n/2`` the generalized eigenvalues of the pencil are the model nodes and
the weights are recovered from the right eigenvectors: with ``V`` the
Vandermonde matrix of the nodes, the eigenvector for node ``xi_j`` is
proportional to the ``j``-th column of ``V^{-T}``, and normalizing it so that
``(V^T u_j)_j = 1`` gives ``c_j = u_j^T [a_0 .. a_{p-1}]^T``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

# Singular values of U0 below RANK_TOL * s_max count as zero.
RANK_TOL = 1e-12
# Eigenvector normalization factors below this (relative) trigger the
# joint Vandermonde least-squares fallback for the weights.
EIGVEC_TOL = 1e-10

FLAG_OK = "ok"
FLAG_DEFLATED = "deflated"
FLAG_VANDERMONDE = "vandermonde-fallback"


@dataclass(frozen=True)
class HankelPencil:
    """The pair ``(U0, U1)`` for a series of even length ``n``."""

    u0: np.ndarray
    u1: np.ndarray
    n: int


@dataclass(frozen=True)
class EigenSolution:
    """Recovered (node, weight) pairs with per-pair quality flags.

    ``dropped`` counts generalized eigenvalues that were excluded: infinite or
    indeterminate ones, and those belonging to the numerically rank-deficient
    part of ``U0``.
    """

    nodes: np.ndarray
    weights: np.ndarray
    condition_flags: tuple[str, ...]
    dropped: int = 0

    @property
    def pairs(self) -> list[tuple[complex, complex]]:
        return [(complex(x), complex(c)) for x, c in zip(self.nodes, self.weights)]


def build_pencil(series) -> HankelPencil:
    """Build ``(U0, U1)`` from a series; the length must be even."""
    a = series.samples
    n = a.size
    if n % 2 != 0:
        raise ValueError("series length must be even")
    m = n // 2
    u0 = scipy.linalg.hankel(a[:m], a[m - 1 : n - 1])
    u1 = scipy.linalg.hankel(a[1 : m + 1], a[m:n])
    u0.flags.writeable = False
    u1.flags.writeable = False
    return HankelPencil(u0=u0, u1=u1, n=n)


def _equilibrate(u0: np.ndarray, u1: np.ndarray) -> np.ndarray:
    """Symmetric two-sided diagonal scaling for the pair.

    Both matrices are Hankel, hence complex symmetric, so one scaling vector
    equilibrates rows and columns simultaneously.  Powers of two keep the
    scaling exact in floating point.
    """
    mags = np.maximum(np.abs(u0), np.abs(u1))
    row_max = mags.max(axis=1)
    row_max[row_max == 0.0] = 1.0
    return np.exp2(np.round(-0.5 * np.log2(row_max)))


def _vandermonde_lstsq(nodes: np.ndarray, samples: np.ndarray) -> np.ndarray:
    """Joint least-squares weights over the full sample range.

    Columns are equilibrated by max(1, |node|)**(n-1) so that nodes far
    outside the unit disk cannot overflow the power table.
    """
    ks = np.arange(samples.size)
    mags = np.abs(nodes)
    log_rho = np.log(np.maximum(1.0, mags))
    unit = nodes.copy()
    outside = mags > 1.0
    unit[outside] = nodes[outside] / mags[outside]
    kmax = samples.size - 1
    scaled = np.exp(np.outer(ks - kmax, log_rho)) * unit[np.newaxis, :] ** ks[:, np.newaxis]
    sol, *_ = np.linalg.lstsq(scaled, samples, rcond=None)
    return sol * np.exp(-kmax * log_rho)


def solve_pencil(pencil: HankelPencil, series) -> EigenSolution:
    """Generalized eigenpairs of ``(U1, U0)`` with weights.

    The pencil is equilibrated by a two-sided diagonal scaling and solved with
    the QZ-based dense generalized eigensolver.  When ``U0`` is rank-deficient
    beyond RANK_TOL the pencil is first compressed onto the numerical row and
    column spaces of ``U0`` (the deficient part is dropped and the retained
    pairs are flagged).  Weights come from the normalized eigenvectors, with a
    joint Vandermonde least-squares fallback when a normalization factor is
    too small to trust.
    """
    u0, u1 = pencil.u0, pencil.u1
    m = u0.shape[0]
    a = series.samples

    svals = np.linalg.svd(u0, compute_uv=False)
    smax = svals[0] if m else 0.0
    rank = int(np.count_nonzero(svals > RANK_TOL * smax)) if smax > 0.0 else 0

    empty = np.empty(0, dtype=np.complex128)
    if rank == 0:
        return EigenSolution(nodes=empty, weights=empty, condition_flags=(), dropped=m)

    if rank < m:
        # Compress onto the rank-r subspace of U0; the pencil restricted there
        # is regular and carries the recoverable nodes.
        w_l, sv, v_r = np.linalg.svd(u0)
        a_red = w_l[:, :rank].conj().T @ u1 @ v_r[:rank, :].conj().T
        b_red = np.diag(sv[:rank])
        vals = scipy.linalg.eig(a_red, b_red, right=False)
        keep = np.isfinite(vals)
        nodes = vals[keep]
        weights = _vandermonde_lstsq(nodes, a) if nodes.size else empty
        flags = (FLAG_DEFLATED,) * nodes.size
        return EigenSolution(
            nodes=nodes, weights=weights, condition_flags=flags, dropped=m - nodes.size
        )

    d = _equilibrate(u0, u1)
    u0s = d[:, None] * u0 * d[None, :]
    u1s = d[:, None] * u1 * d[None, :]
    (alphas, betas), vecs = scipy.linalg.eig(u1s, u0s, homogeneous_eigvals=True)

    scale = np.abs(alphas) + np.abs(betas)
    finite = np.abs(betas) > RANK_TOL * np.where(scale > 0.0, scale, 1.0)
    nodes = alphas[finite] / betas[finite]
    # Undo the column scaling: eigenvectors of the scaled pair are D^{-1} x.
    raw_vecs = d[:, None] * vecs[:, finite]

    weights = np.empty(nodes.size, dtype=np.complex128)
    fallback = False
    head = a[:m]
    for j, xi in enumerate(nodes):
        vand_col = xi ** np.arange(m)
        x = raw_vecs[:, j]
        t = vand_col @ x
        if not np.isfinite(t) or abs(t) < EIGVEC_TOL * (
            np.linalg.norm(x) * np.linalg.norm(vand_col)
        ):
            fallback = True
            break
        weights[j] = (x / t) @ head

    if fallback:
        weights = _vandermonde_lstsq(nodes, a)
        flags = (FLAG_VANDERMONDE,) * nodes.size
    else:
        flags = (FLAG_OK,) * nodes.size
    return EigenSolution(
        nodes=nodes, weights=weights, condition_flags=flags, dropped=m - nodes.size
    )


def truncate_by_weight(solution: EigenSolution, p_tilde: int) -> EigenSolution:
    """Keep the ``p_tilde`` pairs of largest weight modulus.

    The kept pairs are ordered by descending ``|weight|``; ties keep the pair
    with the smaller original index first (stable sort).  Asking for more
    pairs than available returns them all.
    """
    if p_tilde < 1:
        raise ValueError("p_tilde must be at least 1")
    order = np.argsort(-np.abs(solution.weights), kind="stable")[:p_tilde]
    flags = tuple(solution.condition_flags[i] for i in order)
    return EigenSolution(
        nodes=solution.nodes[order],
        weights=solution.weights[order],
        condition_flags=flags,
        dropped=solution.dropped,
    )
