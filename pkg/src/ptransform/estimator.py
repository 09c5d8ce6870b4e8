"""Pseudosample-averaged estimation of exponential models with unknown order.

The estimator perturbs the observed series with R independent synthetic noise
draws (pseudosamples), solves each replication, and reads the model order and
parameters off the replication cloud: replication terms are clustered around
the base solve, each cluster is weighed by the discrete Laplacian of the
pooled log-potential

    F(z) = 1/(2 pi R) * sum_r sum_j c_j^{(r)} log|z - xi_j^{(r)}|

over a small mesh centered at the cluster, and clusters whose mass exceeds
K * sigma in modulus are kept.  Estimates are arithmetic means over cluster
members.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .hankel_pencil import EigenSolution, build_pencil, solve_pencil, truncate_by_weight
from .model import ExponentialModel, ResidualReport, SignalSeries, residual_report
from .prony import LaguerreConvergenceError, fast_ceip

THREADS_ENV_VAR = "PTRANSFORM_THREADS"

# Grid points closer than this to a term node are nudged before taking logs.
SINGULAR_POINT_TOL = 1e-14
# Fraction of fast-path failures that triggers a whole-run slow solve.
FAST_FAILURE_LIMIT = 0.2
KMEANS_MAX_ITER = 100
MESH_REPAIR_MAX_ITER = 200


class EstimationError(RuntimeError):
    """A replication pipeline could not produce a usable result."""


@dataclass(frozen=True)
class PseudosampleConfig:
    """Tuning knobs of the pseudosample estimator.

    ``sigma_prime`` is the standard deviation of the synthetic complex noise
    added to each replication; the total replication noise level is
    ``sigma_tilde(sigma) = sqrt(sigma**2 + sigma_prime**2)``.  ``mesh_delta``
    left at None selects the spacing per cluster as
    ``max(1e-3, member node spread / 3)``.
    """

    R: int = 64
    sigma_prime: float = 0.0
    seed: int = 0
    p_tilde: int = 4
    K: float = 3.0
    mesh_size: int = 7
    mesh_delta: float | None = None
    path: str = "fast"

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be at least 1")
        if not (np.isfinite(self.sigma_prime) and self.sigma_prime >= 0.0):
            raise ValueError("sigma_prime must be finite and non-negative")
        if self.p_tilde < 1:
            raise ValueError("p_tilde must be at least 1")
        if not (np.isfinite(self.K) and self.K > 1.0):
            raise ValueError("K must be greater than 1")
        if self.mesh_size < 3 or self.mesh_size % 2 == 0:
            raise ValueError("mesh_size must be an odd integer >= 3")
        if self.mesh_delta is not None and not (
            np.isfinite(self.mesh_delta) and self.mesh_delta > 0.0
        ):
            raise ValueError("mesh_delta must be positive")
        if self.path not in ("fast", "slow"):
            raise ValueError("path must be 'fast' or 'slow'")

    def sigma_tilde(self, sigma: float) -> float:
        return float(np.hypot(sigma, self.sigma_prime))


@dataclass(frozen=True)
class ReplicationSet:
    """Base solve plus per-replication models.

    ``models[r]`` is None when neither solver produced terms for replication
    ``r``; ``failures`` lists replications that did not complete on the fast
    path (they fell back to the accurate solve, or produced no model at all).
    """

    base: EigenSolution
    models: tuple
    failures: tuple


@dataclass(frozen=True)
class ClusterInfo:
    centroid: complex
    member_refs: tuple
    laplacian_mass: complex
    direct_mass: complex
    mean_weight: complex
    selected: bool
    mesh_size: int
    mesh_delta: float


@dataclass(frozen=True)
class ClusterReport:
    clusters: tuple
    p_hat: int
    estimates: ExponentialModel


@dataclass(frozen=True)
class SweepRow:
    config: PseudosampleConfig
    exceed_count: int
    mse: float
    p_hat: int


@dataclass(frozen=True)
class SweepResult:
    best: PseudosampleConfig
    table: tuple
    failures: tuple


def _max_workers() -> int:
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw.strip() == "":
        return 1
    try:
        value = int(raw)
    except ValueError as err:
        raise ValueError(f"{THREADS_ENV_VAR} must be an integer") from err
    if value < 0:
        raise ValueError(f"{THREADS_ENV_VAR} must be non-negative")
    if value == 0:
        return os.cpu_count() or 1
    return value


def _replication_rng(seed: int, r: int) -> np.random.Generator:
    # Substream keyed on (seed, replication index): independent of execution
    # order and of how many replications run.
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed & 2**64 - 1, r))))


def _run_indexed(func, count: int) -> list:
    workers = _max_workers()
    if workers <= 1 or count <= 1:
        return [func(r) for r in range(count)]
    with ThreadPoolExecutor(max_workers=min(workers, count)) as pool:
        return list(pool.map(func, range(count)))


def generate_pseudosamples(series: SignalSeries, cfg: PseudosampleConfig) -> list[SignalSeries]:
    """R noisy copies of the series, each with an independent complex
    Gaussian perturbation of level ``sigma_prime`` (E|nu|^2 = sigma_prime**2)."""
    sigma_total = cfg.sigma_tilde(series.sigma)
    scale = cfg.sigma_prime / np.sqrt(2.0)
    out = []
    for r in range(cfg.R):
        rng = _replication_rng(cfg.seed, r)
        noise = scale * (rng.standard_normal(series.n) + 1j * rng.standard_normal(series.n))
        out.append(SignalSeries(series.samples + noise, sigma=sigma_total, dt=series.dt))
    return out


def _slow_solve(sample: SignalSeries, p_tilde: int) -> ExponentialModel | None:
    sol = solve_pencil(build_pencil(sample), sample)
    if sol.nodes.size == 0:
        return None
    kept = truncate_by_weight(sol, p_tilde)
    return ExponentialModel(weights=kept.weights, nodes=kept.nodes)


def solve_replications(series: SignalSeries, cfg: PseudosampleConfig) -> ReplicationSet:
    """Accurate base solve plus one solve per pseudosample.

    The fast path warm-starts every replication at the base nodes and falls
    back to the accurate pencil solve on Laguerre failure; if more than
    FAST_FAILURE_LIMIT of the replications fall back, the whole run is redone
    on the slow path.
    """
    if cfg.p_tilde > series.n // 2:
        raise ValueError("p_tilde exceeds the pencil size n/2")
    base_full = solve_pencil(build_pencil(series), series)
    if base_full.nodes.size == 0:
        raise EstimationError("base solve produced no usable eigenpairs")
    base = truncate_by_weight(base_full, cfg.p_tilde)
    p_eff = base.nodes.size
    samples = generate_pseudosamples(series, cfg)

    if cfg.path == "slow":
        models = _run_indexed(lambda r: _slow_solve(samples[r], p_eff), cfg.R)
        failures = tuple(r for r, mdl in enumerate(models) if mdl is None)
        return ReplicationSet(base=base, models=tuple(models), failures=failures)

    def solve_fast(r: int):
        try:
            return fast_ceip(samples[r], base, p_eff), False
        except (LaguerreConvergenceError, ValueError):
            return _slow_solve(samples[r], p_eff), True

    results = _run_indexed(solve_fast, cfg.R)
    fallbacks = {r for r, (_, fell_back) in enumerate(results) if fell_back}
    if len(fallbacks) > FAST_FAILURE_LIMIT * cfg.R:
        models = _run_indexed(lambda r: _slow_solve(samples[r], p_eff), cfg.R)
        return ReplicationSet(base=base, models=tuple(models), failures=tuple(range(cfg.R)))
    models = tuple(mdl for mdl, _ in results)
    missing = {r for r, mdl in enumerate(models) if mdl is None}
    return ReplicationSet(
        base=base, models=models, failures=tuple(sorted(fallbacks | missing))
    )


def _lloyd(points: np.ndarray, init: np.ndarray) -> np.ndarray:
    """Deterministic Lloyd iteration; returns the final assignment.

    Ties go to the lowest cluster index.  An empty cluster is reseeded at the
    point currently farthest from its own centroid (among clusters that can
    spare a point).
    """
    n_pts = points.shape[0]
    k = init.shape[0]
    centroids = init.astype(float).copy()
    prev = None
    assign = np.zeros(n_pts, dtype=int)
    for _ in range(KMEANS_MAX_ITER):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        counts = np.bincount(assign, minlength=k)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            own = d2[np.arange(n_pts), assign]
            order = np.argsort(-own, kind="stable")
            pos = 0
            for c in empties:
                while pos < order.size and counts[assign[order[pos]]] <= 1:
                    pos += 1
                if pos >= order.size:
                    break
                idx = order[pos]
                pos += 1
                counts[assign[idx]] -= 1
                assign[idx] = c
                counts[c] = 1
                centroids[c] = points[idx]
            prev = None
        if prev is not None and np.array_equal(assign, prev):
            break
        prev = assign.copy()
        for c in range(k):
            members = points[assign == c]
            if members.shape[0]:
                centroids[c] = members.mean(axis=0)
    return assign


def cluster_solutions(reps: ReplicationSet, cfg: PseudosampleConfig) -> ClusterReport:
    """Group replication terms around the base solve with k-means in R^3.

    Features are (Re xi, Im xi, w * |c|) where w balances the node spread of
    the base against its weight spread; centroids are initialized at the base
    terms, one cluster per base term.
    """
    refs: list[tuple[int, int]] = []
    feats: list[list[float]] = []
    node_list: list[complex] = []
    for r, mdl in enumerate(reps.models):
        if mdl is None:
            continue
        for j, (c, x) in enumerate(zip(mdl.weights, mdl.nodes)):
            refs.append((r, j))
            feats.append([x.real, x.imag, abs(c)])
            node_list.append(x)
    if not refs:
        raise EstimationError("no replication solutions to cluster")

    base_nodes = reps.base.nodes
    base_weights = reps.base.weights
    node_spread = float(np.std(base_nodes))
    weight_spread = float(np.std(np.abs(base_weights)))
    if weight_spread > 1e-12 * (1.0 + float(np.mean(np.abs(base_weights)))):
        w = node_spread / weight_spread
    else:
        w = 0.0

    points = np.asarray(feats, dtype=float)
    points[:, 2] *= w
    init = np.column_stack(
        [base_nodes.real, base_nodes.imag, w * np.abs(base_weights)]
    )
    assign = _lloyd(points, init)

    nodes_arr = np.asarray(node_list)
    clusters = []
    for c in range(init.shape[0]):
        members = np.flatnonzero(assign == c)
        if members.size:
            centroid = complex(nodes_arr[members].mean())
        else:
            centroid = complex(base_nodes[c])
        clusters.append(
            ClusterInfo(
                centroid=centroid,
                member_refs=tuple(refs[i] for i in members),
                laplacian_mass=0.0 + 0.0j,
                direct_mass=0.0 + 0.0j,
                mean_weight=0.0 + 0.0j,
                selected=False,
                mesh_size=cfg.mesh_size,
                mesh_delta=cfg.mesh_delta if cfg.mesh_delta is not None else 0.0,
            )
        )
    return ClusterReport(clusters=tuple(clusters), p_hat=0, estimates=ExponentialModel())


def _model_count(reps: ReplicationSet) -> int:
    return sum(1 for mdl in reps.models if mdl is not None)


def laplacian_mass(
    reps: ReplicationSet,
    center: complex,
    cfg: PseudosampleConfig,
    *,
    mesh_size: int | None = None,
    mesh_delta: float | None = None,
) -> complex:
    """Discrete mass of the pooled log-potential on a mesh around ``center``.

    The five-point Laplacian of F, summed over the interior of a
    ``size x size`` mesh with spacing ``delta`` and multiplied by delta**2,
    approximates the total weight of the replication terms inside the mesh
    divided by the replication count.
    """
    size = cfg.mesh_size if mesh_size is None else mesh_size
    delta = mesh_delta if mesh_delta is not None else (cfg.mesh_delta or 1e-3)
    nodes = []
    weights = []
    for mdl in reps.models:
        if mdl is None:
            continue
        nodes.append(mdl.nodes)
        weights.append(mdl.weights)
    count = len(nodes)
    if count == 0:
        raise EstimationError("no replication solutions to weigh")
    nodes = np.concatenate(nodes)
    weights = np.concatenate(weights)

    half = (size - 1) // 2
    offsets = (np.arange(size) - half) * delta
    zs = (center.real + offsets)[:, None] + 1j * (center.imag + offsets)[None, :]
    pts = zs.ravel()
    dist = np.abs(pts[:, None] - nodes[None, :])
    hot = np.flatnonzero((dist < SINGULAR_POINT_TOL).any(axis=1))
    if hot.size:
        pts = pts.copy()
        pts[hot] += delta * 1e-6
        dist[hot] = np.abs(pts[hot, None] - nodes[None, :])
    f = (np.log(dist) @ weights).reshape(size, size) / (2.0 * np.pi * count)
    interior = (
        f[:-2, 1:-1] + f[2:, 1:-1] + f[1:-1, :-2] + f[1:-1, 2:] - 4.0 * f[1:-1, 1:-1]
    )
    return complex(interior.sum())


def _repair_meshes(centers: list[complex], sizes: list[int], deltas: list[float]) -> None:
    """Shrink overlapping square meshes in place until pairwise disjoint.

    Sizes shrink first (never below 3x3); once both members of an offending
    pair are minimal their spacings are halved.  Pairs with identical centers
    cannot be separated and are skipped.
    """
    k = len(centers)
    hopeless: set[tuple[int, int]] = set()
    for _ in range(MESH_REPAIR_MAX_ITER):
        clash = None
        for i in range(k):
            for j in range(i + 1, k):
                if (i, j) in hopeless:
                    continue
                reach = (sizes[i] - 1) / 2 * deltas[i] + (sizes[j] - 1) / 2 * deltas[j]
                dx = abs(centers[i].real - centers[j].real)
                dy = abs(centers[i].imag - centers[j].imag)
                if max(dx, dy) <= reach:
                    clash = (i, j)
                    break
            if clash:
                break
        if clash is None:
            return
        i, j = clash
        if centers[i] == centers[j]:
            hopeless.add((i, j))
            continue
        if sizes[i] > 3 or sizes[j] > 3:
            sizes[i] = max(3, sizes[i] - 2)
            sizes[j] = max(3, sizes[j] - 2)
        else:
            deltas[i] *= 0.5
            deltas[j] *= 0.5


def select_and_estimate(
    reps: ReplicationSet,
    clusters: ClusterReport,
    series: SignalSeries,
    cfg: PseudosampleConfig,
    top_k: int | None = None,
) -> ClusterReport:
    """Weigh each cluster, keep the significant ones, and average members.

    A cluster is selected when ``|laplacian_mass| > K * sigma`` (strict); with
    ``top_k`` given the threshold is bypassed and the ``top_k`` clusters of
    largest mass modulus are kept instead.  Estimated terms are arithmetic
    means of the member nodes and weights; ``direct_mass`` is the plain sum of
    member weights over the replication count.
    """
    count = _model_count(reps)
    populated = [i for i, c in enumerate(clusters.clusters) if c.member_refs]

    centers = [clusters.clusters[i].centroid for i in populated]
    sizes = [cfg.mesh_size for _ in populated]
    deltas = []
    for i in populated:
        if cfg.mesh_delta is not None:
            deltas.append(cfg.mesh_delta)
        else:
            member_nodes = np.array(
                [reps.models[r].nodes[j] for r, j in clusters.clusters[i].member_refs]
            )
            deltas.append(max(1e-3, float(np.std(member_nodes)) / 3.0))
    _repair_meshes(centers, sizes, deltas)

    masses = {}
    mesh_params = {}
    for i, size, delta in zip(populated, sizes, deltas):
        masses[i] = laplacian_mass(
            reps, clusters.clusters[i].centroid, cfg, mesh_size=size, mesh_delta=delta
        )
        mesh_params[i] = (size, delta)

    if top_k is not None:
        ranked = sorted(populated, key=lambda i: -abs(masses[i]))
        selected_ids = set(ranked[: max(0, top_k)])
    else:
        threshold = cfg.K * series.sigma
        selected_ids = {i for i in populated if abs(masses[i]) > threshold}

    out = []
    est_weights = []
    est_nodes = []
    for i, info in enumerate(clusters.clusters):
        if not info.member_refs:
            out.append(info)
            continue
        member_nodes = np.array([reps.models[r].nodes[j] for r, j in info.member_refs])
        member_weights = np.array(
            [reps.models[r].weights[j] for r, j in info.member_refs]
        )
        size, delta = mesh_params[i]
        selected = i in selected_ids
        out.append(
            ClusterInfo(
                centroid=info.centroid,
                member_refs=info.member_refs,
                laplacian_mass=masses[i],
                direct_mass=complex(member_weights.sum() / count),
                mean_weight=complex(member_weights.mean()),
                selected=selected,
                mesh_size=size,
                mesh_delta=delta,
            )
        )
        if selected:
            est_weights.append(member_weights.mean())
            est_nodes.append(member_nodes.mean())

    estimates = ExponentialModel(
        weights=np.asarray(est_weights, dtype=np.complex128),
        nodes=np.asarray(est_nodes, dtype=np.complex128),
    )
    return ClusterReport(clusters=tuple(out), p_hat=len(est_nodes), estimates=estimates)


def ptransform_estimate(
    series: SignalSeries, cfg: PseudosampleConfig
) -> tuple[ClusterReport, ResidualReport]:
    """Full pipeline: replications, clustering, selection, residuals."""
    reps = solve_replications(series, cfg)
    grouped = cluster_solutions(reps, cfg)
    report = select_and_estimate(reps, grouped, series, cfg)
    return report, residual_report(series, report.estimates)


def estimate_from_replicates(samples, cfg: PseudosampleConfig) -> ClusterReport:
    """Run the pipeline on real repeated measurements instead of pseudosamples.

    The base solve uses the pointwise mean of the replicates; no synthetic
    noise is added, so ``cfg.R`` and ``cfg.sigma_prime`` are ignored.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("need at least one replicate")
    n = samples[0].n
    if any(s.n != n for s in samples):
        raise ValueError("replicates must share a common length")
    if cfg.p_tilde > n // 2:
        raise ValueError("p_tilde exceeds the pencil size n/2")

    mean_series = SignalSeries(
        np.mean([s.samples for s in samples], axis=0),
        sigma=samples[0].sigma,
        dt=samples[0].dt,
    )
    base_full = solve_pencil(build_pencil(mean_series), mean_series)
    if base_full.nodes.size == 0:
        raise EstimationError("base solve produced no usable eigenpairs")
    base = truncate_by_weight(base_full, cfg.p_tilde)
    p_eff = base.nodes.size

    def solve_one(r: int):
        if cfg.path == "slow":
            return _slow_solve(samples[r], p_eff), False
        try:
            return fast_ceip(samples[r], base, p_eff), False
        except (LaguerreConvergenceError, ValueError):
            return _slow_solve(samples[r], p_eff), True

    results = _run_indexed(solve_one, len(samples))
    models = tuple(mdl for mdl, _ in results)
    failures = tuple(
        r for r, (mdl, fell_back) in enumerate(results) if fell_back or mdl is None
    )
    reps = ReplicationSet(base=base, models=models, failures=failures)
    grouped = cluster_solutions(reps, cfg)
    return select_and_estimate(reps, grouped, samples[0], cfg)


def sweep_hyperparameters(series: SignalSeries, grid) -> SweepResult:
    """Try every config and keep the one with the fewest residuals above sigma.

    Ties prefer the smaller estimated order, then the smaller mse.  Configs
    that fail outright are excluded from the table; if every config fails an
    EstimationError summarizing the per-config diagnostics is raised.
    """
    rows: list[SweepRow] = []
    failures: list[tuple[PseudosampleConfig, str]] = []
    for cfg in grid:
        try:
            report, resid = ptransform_estimate(series, cfg)
        except (EstimationError, ValueError, np.linalg.LinAlgError) as err:
            failures.append((cfg, f"{type(err).__name__}: {err}"))
            continue
        rows.append(
            SweepRow(
                config=cfg,
                exceed_count=resid.exceed_count,
                mse=resid.mse,
                p_hat=report.p_hat,
            )
        )
    if not rows:
        detail = "; ".join(f"{cfg}: {msg}" for cfg, msg in failures)
        raise EstimationError(f"all sweep configurations failed: {detail}")
    best = min(rows, key=lambda row: (row.exceed_count, row.p_hat, row.mse))
    return SweepResult(best=best.config, table=tuple(rows), failures=tuple(failures))
