"""Applications of the exponential-model machinery.

Included here: recovering polygon vertices from harmonic moments (and the
forward map), filling a gap between two recorded segments of one signal,
extrapolating beyond the record, and turning recovered terms into spectral
lines after an optional passband filter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np

from .estimator import (
    ClusterReport,
    PseudosampleConfig,
    ReplicationSet,
    _replication_rng,
    cluster_solutions,
    ptransform_estimate,
    select_and_estimate,
    solve_replications,
)
from .hankel_pencil import EigenSolution, build_pencil, solve_pencil, truncate_by_weight
from .model import ExponentialModel, SignalSeries, evaluate_model
from .prony import GapSpec, LaguerreConvergenceError, laguerre_roots, linear_prediction, vandermonde_weights

# Cross products below this (relative to the edge lengths) flag collinear
# consecutive vertices.
COLLINEAR_TOL = 1e-14


@dataclass(frozen=True)
class Polygon:
    """Simple polygon given by its vertices in counterclockwise order."""

    vertices: np.ndarray

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.complex128)
        if verts.ndim != 1 or verts.size < 3:
            raise ValueError("polygon needs at least 3 vertices")
        if not np.all(np.isfinite(verts)):
            raise ValueError("vertices contain non-finite entries")
        p = verts.size
        for i in range(p):
            for j in range(i + 1, p):
                if verts[i] == verts[j]:
                    raise ValueError("coincident vertices")
        prev = np.roll(verts, 1)
        nxt = np.roll(verts, -1)
        e_in = verts - prev
        e_out = nxt - verts
        cross = np.imag(np.conj(e_in) * e_out)
        if np.any(np.abs(cross) <= COLLINEAR_TOL * np.abs(e_in) * np.abs(e_out)):
            raise ValueError("three consecutive vertices are collinear")
        # Shoelace area; positive means counterclockwise.
        area = 0.5 * float(np.sum(np.imag(np.conj(verts) * nxt)))
        if area <= 0.0:
            raise ValueError("vertices must be in counterclockwise order")
        verts.flags.writeable = False
        object.__setattr__(self, "vertices", verts)

    @property
    def order(self) -> int:
        return self.vertices.size


@dataclass(frozen=True)
class MomentSequence:
    """Harmonic moments of a vertex measure; entries 0 and 1 are zero and
    entry k (k >= 2) is the area integral of z**(k-2) over the polygon."""

    moments: np.ndarray
    sigma: float = 0.0

    def __post_init__(self):
        moments = np.asarray(self.moments, dtype=np.complex128)
        if moments.ndim != 1:
            raise ValueError("moments must be one-dimensional")
        if not np.all(np.isfinite(moments)):
            raise ValueError("moments contain non-finite entries")
        if not (np.isfinite(self.sigma) and self.sigma >= 0.0):
            raise ValueError("sigma must be finite and non-negative")
        moments.flags.writeable = False
        object.__setattr__(self, "moments", moments)


@dataclass(frozen=True)
class SpectralLine:
    frequency_hz: float
    decay_rate: float
    area: float
    phase: float
    mode_ppm: float | None = None


def vertex_weights(polygon: Polygon) -> np.ndarray:
    """Vertex weights of the polygon's second-derivative quadrature rule.

    With cyclic indexing, vertex j carries

        c_j = (i/2) * [ (conj(x_{j-1}) - conj(x_j)) / (x_{j-1} - x_j)
                       - (conj(x_j) - conj(x_{j+1})) / (x_j - x_{j+1}) ],

    so that sum_j c_j f(x_j) equals the area integral of f'' for analytic f.
    In particular sum_j c_j = 0 and sum_j c_j x_j = 0.
    """
    x = polygon.vertices
    prev = np.roll(x, 1)
    nxt = np.roll(x, -1)
    first = (np.conj(prev) - np.conj(x)) / (prev - x)
    second = (np.conj(x) - np.conj(nxt)) / (x - nxt)
    return 0.5j * (first - second)


def moments_from_polygon(polygon: Polygon, count: int) -> MomentSequence:
    """First ``count`` harmonic moments of the polygon's vertex measure.

    ``k * (k-1) * mu_k = sum_j c_j x_j**k`` for k >= 2, with mu_0 = mu_1 = 0;
    mu_k equals the area integral of z**(k-2) over the polygon.
    """
    if count < 3:
        raise ValueError("count must be at least 3")
    weights = vertex_weights(polygon)
    x = polygon.vertices
    mu = np.zeros(count, dtype=np.complex128)
    ks = np.arange(2, count)
    powers = x[np.newaxis, :] ** ks[:, np.newaxis]
    mu[2:] = (powers @ weights) / (ks * (ks - 1))
    return MomentSequence(moments=mu, sigma=0.0)


def signal_from_moments(moments: MomentSequence) -> SignalSeries:
    """Exponential-sum data ``s_k = k (k-1) mu_k`` ready for the pencil.

    The index-dependent factor also scales any white noise on the moments, so
    the recorded noise level is the root mean square of ``k (k-1) sigma``
    over the used index range.  Odd-length sequences are trimmed by one entry
    to keep the pencil square.
    """
    length = moments.moments.size - (moments.moments.size % 2)
    ks = np.arange(length)
    factors = ks * (ks - 1)
    samples = factors * moments.moments[:length]
    sigma = float(moments.sigma * np.sqrt(np.mean(factors.astype(float) ** 2)))
    return SignalSeries(samples, sigma=sigma)


def vertices_from_moments(
    moments: MomentSequence, cfg: PseudosampleConfig, p_known: int | None = None
) -> tuple[ExponentialModel, ClusterReport]:
    """Recover the vertex measure (weights and vertex locations) from moments.

    With ``p_known`` the threshold selection is bypassed and the ``p_known``
    clusters of largest mass are returned.  The recovered vertices come back
    as a set; use :func:`order_vertices` to rebuild a polygon.
    """
    if moments.moments.size < 4:
        raise ValueError("need at least 4 moments")
    target = p_known if p_known is not None else cfg.p_tilde
    if moments.moments.size < 2 * target:
        raise ValueError("fewer moments than twice the sought order")
    series = signal_from_moments(moments)
    run_cfg = replace(cfg, p_tilde=max(cfg.p_tilde, target))
    reps = solve_replications(series, run_cfg)
    grouped = cluster_solutions(reps, run_cfg)
    report = select_and_estimate(reps, grouped, series, run_cfg, top_k=p_known)
    return report.estimates, report


def order_vertices(points) -> Polygon:
    """Arrange a recovered vertex set counterclockwise around its centroid."""
    pts = np.asarray(points, dtype=np.complex128)
    if pts.size < 3:
        raise ValueError("need at least 3 vertices")
    rel = pts - pts.mean()
    order = np.lexsort((np.abs(rel), np.angle(rel)))
    return Polygon(pts[order])


def _perturbed_segment(segment: SignalSeries, noise: np.ndarray, sigma_total: float) -> SignalSeries:
    return SignalSeries(segment.samples + noise, sigma=sigma_total, dt=segment.dt)


def _solve_segment_fast(sample: SignalSeries, base_nodes: np.ndarray, p_tilde: int) -> np.ndarray:
    poly = linear_prediction(sample, p_tilde)
    return laguerre_roots(poly, base_nodes)


def _solve_segment_slow(sample: SignalSeries, p_tilde: int) -> np.ndarray | None:
    sol = solve_pencil(build_pencil(sample), sample)
    if sol.nodes.size == 0:
        return None
    return truncate_by_weight(sol, p_tilde).nodes


def interpolate_gap(
    seg1: SignalSeries, seg2: SignalSeries, q: int, cfg: PseudosampleConfig
) -> np.ndarray:
    """Fill ``q`` missing samples between two equal-length segments.

    Both segments are solved per replication, the union of their nodes enters
    one joint weight solve on the gapped index set {0..n-1, n+q..2n+q-1}, and
    the usual cluster/select/average pipeline runs on the pooled terms.  The
    returned values are the estimates at indices n .. n+q-1.
    """
    if q < 0:
        raise ValueError("gap must be non-negative")
    if seg1.n != seg2.n:
        raise ValueError("segments must have equal length")
    if q == 0:
        return np.empty(0, dtype=np.complex128)
    n = seg1.n
    p_tilde = cfg.p_tilde
    if p_tilde > n // 2:
        raise ValueError("p_tilde exceeds the pencil size n/2")
    gap = GapSpec(segment_length=n, gap=q)
    joint_data = np.concatenate([seg1.samples, seg2.samples])

    bases = []
    for seg in (seg1, seg2):
        sol = solve_pencil(build_pencil(seg), seg)
        if sol.nodes.size == 0:
            raise ValueError("segment solve produced no usable eigenpairs")
        bases.append(truncate_by_weight(sol, p_tilde))
    pooled_nodes = np.concatenate([b.nodes for b in bases])
    pooled_weights = vandermonde_weights(pooled_nodes, joint_data, gap)
    base = EigenSolution(
        nodes=pooled_nodes,
        weights=pooled_weights,
        condition_flags=tuple(f for b in bases for f in b.condition_flags),
        dropped=sum(b.dropped for b in bases),
    )

    sigma_total = cfg.sigma_tilde(seg1.sigma)
    scale = cfg.sigma_prime / np.sqrt(2.0)
    models = []
    failures = []
    for r in range(cfg.R):
        rng = _replication_rng(cfg.seed, r)
        noise = scale * (rng.standard_normal(2 * n) + 1j * rng.standard_normal(2 * n))
        samples = [
            _perturbed_segment(seg1, noise[:n], sigma_total),
            _perturbed_segment(seg2, noise[n:], sigma_total),
        ]
        node_parts = []
        fell_back = False
        failed = False
        for sample, seg_base in zip(samples, bases):
            nodes = None
            if cfg.path == "fast":
                try:
                    nodes = _solve_segment_fast(sample, seg_base.nodes, p_tilde)
                except (LaguerreConvergenceError, ValueError):
                    fell_back = True
            if nodes is None:
                nodes = _solve_segment_slow(sample, p_tilde)
            if nodes is None:
                failed = True
                break
            node_parts.append(nodes)
        if failed:
            models.append(None)
            failures.append(r)
            continue
        nodes_r = np.concatenate(node_parts)
        weights_r = vandermonde_weights(nodes_r, np.concatenate([s.samples for s in samples]), gap)
        models.append(ExponentialModel(weights=weights_r, nodes=nodes_r))
        if fell_back:
            failures.append(r)

    reps = ReplicationSet(base=base, models=tuple(models), failures=tuple(failures))
    grouped = cluster_solutions(reps, cfg)
    report = select_and_estimate(reps, grouped, seg1, cfg)
    return evaluate_model(report.estimates, range(n, n + q))


def extrapolate(series: SignalSeries, horizon: int, cfg: PseudosampleConfig) -> np.ndarray:
    """Predict ``horizon`` samples past the end of the series.

    When the estimator selects no clusters the prediction is all zeros and a
    warning is emitted.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    report, _ = ptransform_estimate(series, cfg)
    if report.p_hat == 0:
        warnings.warn("no clusters selected; extrapolating zeros", stacklevel=2)
        return np.zeros(horizon, dtype=np.complex128)
    return evaluate_model(report.estimates, range(series.n, series.n + horizon))


def passband_filter(
    series: SignalSeries, f_lo: float, f_hi: float, decimate: int = 1
) -> SignalSeries:
    """Keep one frequency band of the series, then optionally decimate.

    Frequencies are normalized to [0, 1): DFT bin k sits at k/n.  Bins outside
    [f_lo, f_hi) are zeroed; when decimating, the band is first demodulated by
    its center so the retained spectrum fits the reduced sample rate.  The
    noise level scales with the square root of the retained bin fraction, and
    dt grows by the decimation factor.
    """
    if not (0.0 <= f_lo < f_hi <= 1.0):
        raise ValueError("need 0 <= f_lo < f_hi <= 1")
    if decimate < 1:
        raise ValueError("decimate must be at least 1")
    n = series.n
    if n % decimate != 0:
        raise ValueError("decimate must divide the series length")
    freqs = np.arange(n) / n
    mask = (freqs >= f_lo) & (freqs < f_hi)
    spectrum = np.fft.fft(series.samples)
    spectrum[~mask] = 0.0
    filtered = np.fft.ifft(spectrum)
    if decimate > 1:
        center = 0.5 * (f_lo + f_hi)
        filtered = filtered * np.exp(-2j * np.pi * center * np.arange(n))
        filtered = filtered[::decimate]
    sigma = series.sigma * float(np.sqrt(np.count_nonzero(mask) / n))
    return SignalSeries(filtered, sigma=sigma, dt=series.dt * decimate)


def lines_from_model(
    model: ExponentialModel, dt: float, reference_hz: float | None = None
) -> list[SpectralLine]:
    """Spectral-line parameters of each model term.

    frequency = arg(node) / (2 pi dt), decay rate = -ln|node| / dt, area and
    phase are modulus and argument of the weight.  With a reference frequency
    the line position is also expressed in parts per million.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    lines = []
    for c, x in zip(model.weights, model.nodes):
        radius = abs(x)
        if radius == 0.0:
            raise ValueError("node at origin has no line interpretation")
        freq = float(np.angle(x) / (2.0 * np.pi * dt))
        decay = float(-np.log(radius) / dt)
        ppm = None if reference_hz is None else float(freq / reference_hz * 1e6)
        lines.append(
            SpectralLine(
                frequency_hz=freq,
                decay_rate=decay,
                area=float(abs(c)),
                phase=float(np.angle(c)),
                mode_ppm=ppm,
            )
        )
    return lines


def area_ratios(lines) -> np.ndarray:
    """Line areas divided by the smallest area, in the given order."""
    areas = np.array([line.area for line in lines], dtype=float)
    if areas.size == 0:
        raise ValueError("no lines given")
    smallest = areas.min()
    if smallest == 0.0:
        raise ValueError("smallest line area is zero")
    return areas / smallest
