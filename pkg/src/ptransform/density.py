"""Condensed density of the pencil eigenvalues under complex Gaussian noise.

For a series of even length ``n`` with pencil matrices ``U0`` and ``U1``, the
expected quadratic form of the shifted pencil at ``z`` is

    M(z) = B(z) B(z)^H + (n sigma^2 / 2) A(z),    B(z) = U1 - z U0,

where ``A(z)`` is the tridiagonal Hermitian matrix with diagonal
``1 + |z|^2``, superdiagonal ``-z`` and subdiagonal ``-conj(z)``.  The
condensed density is the normalized Laplacian of the summed log-eigenvalues

    h(z) = 1/(2 pi n) * Lap sum_j log mu_j(z),

a probability-like surface that concentrates where pencil eigenvalues of
noisy realizations of the series are likely to fall.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SignalSeries, evaluate_model
from .hankel_pencil import build_pencil

# Eigenvalues of M below EIG_FLOOR_TOL * trace(M)/m are treated as zero and
# excluded from the log sum.
EIG_FLOOR_TOL = 1e-13


@dataclass(frozen=True)
class Lattice:
    """Rectangular evaluation grid in the complex plane."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    nx: int
    ny: int

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError("lattice bounds must be ordered")
        if self.nx < 3 or self.ny < 3:
            raise ValueError("lattice needs at least 3 points per axis")

    @property
    def dx(self) -> float:
        return (self.x_max - self.x_min) / (self.nx - 1)

    @property
    def dy(self) -> float:
        return (self.y_max - self.y_min) / (self.ny - 1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x_min, self.x_max, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y_min, self.y_max, self.ny)


@dataclass(frozen=True)
class DensityMap:
    """Condensed density values on a lattice; the boundary ring is zero and
    excluded from ``total_mass``."""

    lattice: Lattice
    values: np.ndarray
    total_mass: float


@dataclass(frozen=True)
class IdentifiabilityQuery:
    """Candidate neighborhoods: disks (center, radius) around putative nodes."""

    centers: tuple
    radii: tuple

    def __post_init__(self):
        if len(self.centers) != len(self.radii):
            raise ValueError("centers and radii must have equal length")
        if any(r <= 0 for r in self.radii):
            raise ValueError("radii must be positive")


@dataclass(frozen=True)
class CandidateAssessment:
    center: complex
    radius: float
    unimodal: bool
    overlaps: bool


@dataclass(frozen=True)
class IdentifiabilityReport:
    identifiable: bool
    candidates: tuple


def noise_penalty_matrix(z: complex, m: int) -> np.ndarray:
    """Tridiagonal Hermitian PSD coupling of white noise into the pencil.

    Diagonal ``1 + |z|^2``, superdiagonal ``-z``, subdiagonal ``-conj(z)``;
    its eigenvalues are ``1 + |z|^2 - 2 |z| cos(k pi / (m+1))``.
    """
    if m < 1:
        raise ValueError("matrix order must be positive")
    a = np.zeros((m, m), dtype=np.complex128)
    np.fill_diagonal(a, 1.0 + abs(z) ** 2)
    idx = np.arange(m - 1)
    a[idx, idx + 1] = -z
    a[idx + 1, idx] = -np.conj(z)
    return a


def _log_eig_sum(b: np.ndarray, noise_term: np.ndarray) -> float:
    m = b.shape[0]
    mat = b @ b.conj().T + noise_term
    mu = np.linalg.eigvalsh(mat)
    floor = EIG_FLOOR_TOL * float(np.trace(mat).real) / m
    positive = mu[mu > floor]
    if positive.size == 0:
        return -np.inf
    return float(np.sum(np.log(positive)))


def log_potential_sum(signal: SignalSeries, z: complex, sigma: float | None = None) -> float:
    """``sum_j log mu_j(z)`` over the positive eigenvalues of ``M(z)``.

    ``sigma`` defaults to the noise level recorded on the signal.
    """
    pencil = build_pencil(signal)
    sigma = signal.sigma if sigma is None else sigma
    n = signal.n
    b = pencil.u1 - z * pencil.u0
    noise = (n * sigma**2 / 2.0) * noise_penalty_matrix(z, n // 2)
    return _log_eig_sum(b, noise)


def condensed_density_map(signal: SignalSeries, sigma: float, lattice: Lattice) -> DensityMap:
    """Condensed density on a lattice via the five-point Laplacian.

    The log-eigenvalue surface is evaluated at every lattice point, the
    Laplacian is formed on the interior, the boundary ring is zeroed, and the
    total mass is the interior sum times the cell area.
    """
    if lattice.nx < 5 or lattice.ny < 5:
        raise ValueError("lattice needs at least 5 points per axis for the Laplacian")
    pencil = build_pencil(signal)
    n = signal.n
    m = n // 2
    scale = n * sigma**2 / 2.0
    xs, ys = lattice.xs, lattice.ys
    g = np.empty((lattice.nx, lattice.ny), dtype=float)
    for ix, x in enumerate(xs):
        for iy, y in enumerate(ys):
            z = complex(x, y)
            b = pencil.u1 - z * pencil.u0
            g[ix, iy] = _log_eig_sum(b, scale * noise_penalty_matrix(z, m))
    if not np.all(np.isfinite(g)):
        raise ValueError("log-eigenvalue surface is singular on the lattice")

    lap = (g[:-2, 1:-1] - 2.0 * g[1:-1, 1:-1] + g[2:, 1:-1]) / lattice.dx**2 + (
        g[1:-1, :-2] - 2.0 * g[1:-1, 1:-1] + g[1:-1, 2:]
    ) / lattice.dy**2
    values = np.zeros_like(g)
    values[1:-1, 1:-1] = lap / (2.0 * np.pi * n)
    total = float(values[1:-1, 1:-1].sum() * lattice.dx * lattice.dy)
    values.flags.writeable = False
    return DensityMap(lattice=lattice, values=values, total_mass=total)


def _disk_points(lattice: Lattice, center: complex, radius: float) -> np.ndarray:
    xs, ys = lattice.xs, lattice.ys
    dx = xs[:, None] - center.real
    dy = ys[None, :] - center.imag
    return dx**2 + dy**2 <= radius**2


def check_identifiability(dmap: DensityMap, query: IdentifiabilityQuery) -> IdentifiabilityReport:
    """Unimodality of the density inside each candidate disk plus disjointness.

    A candidate is unimodal when the map restricted to the lattice points of
    its disk has exactly one strict local maximum (8-neighborhood, compared
    only against neighbors inside the disk).  The configuration is
    identifiable when every candidate is unimodal and no two disks intersect.
    """
    lattice = dmap.lattice
    values = dmap.values
    masks = []
    for center, radius in zip(query.centers, query.radii):
        mask = _disk_points(lattice, center, radius)
        if np.count_nonzero(mask) < 9:
            raise ValueError("candidate region not covered")
        masks.append(mask)

    neighborhood = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
    assessments = []
    for idx, (center, radius) in enumerate(zip(query.centers, query.radii)):
        mask = masks[idx]
        peaks = 0
        for ix, iy in zip(*np.nonzero(mask)):
            has_neighbor = False
            is_peak = True
            for di, dj in neighborhood:
                jx, jy = ix + di, iy + dj
                if not (0 <= jx < lattice.nx and 0 <= jy < lattice.ny):
                    continue
                if not mask[jx, jy]:
                    continue
                has_neighbor = True
                if values[jx, jy] >= values[ix, iy]:
                    is_peak = False
                    break
            if has_neighbor and is_peak:
                peaks += 1
        overlaps = any(
            abs(center - other) <= radius + query.radii[j]
            for j, other in enumerate(query.centers)
            if j != idx
        )
        assessments.append(
            CandidateAssessment(
                center=complex(center), radius=float(radius), unimodal=peaks == 1, overlaps=overlaps
            )
        )
    identifiable = all(a.unimodal for a in assessments) and not any(
        a.overlaps for a in assessments
    )
    return IdentifiabilityReport(identifiable=identifiable, candidates=tuple(assessments))


@dataclass(frozen=True)
class DesignRow:
    model_index: int
    sigma: float
    n: int
    identifiable: bool


def _default_query(nodes: np.ndarray, lattice: Lattice) -> IdentifiabilityQuery:
    """Disks around the nodes: just under half the minimal pairwise distance,
    floored at twice the lattice spacing so each disk covers a 3x3 patch."""
    spacing = max(lattice.dx, lattice.dy)
    if nodes.size >= 2:
        dists = [
            abs(nodes[i] - nodes[j])
            for i in range(nodes.size)
            for j in range(i + 1, nodes.size)
        ]
        radius = 0.45 * min(dists)
    else:
        radius = 0.25 * min(lattice.x_max - lattice.x_min, lattice.y_max - lattice.y_min)
    radius = max(radius, 2.0 * spacing)
    return IdentifiabilityQuery(
        centers=tuple(complex(x) for x in nodes), radii=(radius,) * nodes.size
    )


def design_experiment(candidate_signals, sigma_grid, n_grid, lattice: Lattice) -> list[DesignRow]:
    """Identifiability table over models x noise levels x series lengths.

    Every combination is assessed (no winner is picked).  Candidates whose
    node neighborhoods fall outside the lattice are reported as not
    identifiable rather than raising.
    """
    rows = []
    for idx, model in enumerate(candidate_signals):
        for sigma in sigma_grid:
            for n in n_grid:
                if n % 2 != 0 or n < 4:
                    raise ValueError("series lengths must be even and at least 4")
                samples = evaluate_model(model, range(n))
                series = SignalSeries(samples, sigma=float(sigma))
                dmap = condensed_density_map(series, float(sigma), lattice)
                query = _default_query(model.nodes, lattice)
                try:
                    verdict = check_identifiability(dmap, query).identifiable
                except ValueError:
                    verdict = False
                rows.append(
                    DesignRow(model_index=idx, sigma=float(sigma), n=int(n), identifiable=verdict)
                )
    return rows
