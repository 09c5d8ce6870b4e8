"""On-disk formats.

Series travel as two-column CSV (``re,im`` per row, optional header) or as a
JSON object ``{"sigma": .., "dt": .., "samples": [[re, im], ..]}``.  Vertex
and moment lists are plain text with one ``re im`` pair per line.  Density
maps are plain-text grids with a one-line header.  Estimation results are a
JSON document with a schema version and a run manifest.  All floating-point
values are written with ``repr`` so they round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .applications import MomentSequence, Polygon
from .density import DensityMap, Lattice
from .estimator import ClusterReport
from .model import ExponentialModel, ResidualReport, SignalSeries

SCHEMA_VERSION = 1


class FileFormatError(ValueError):
    """Malformed input file; the message carries the offending location."""


def _detect_format(path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "json"):
            raise FileFormatError(f"unknown series format {fmt!r}")
        return fmt
    suffix = Path(path).suffix.lower()
    if suffix == ".json":
        return "json"
    return "csv"


def read_series(path, fmt: str | None = None, sigma: float | None = None, dt: float | None = None) -> SignalSeries:
    """Load a series; ``sigma``/``dt`` arguments override stored metadata."""
    kind = _detect_format(path, fmt)
    if kind == "json":
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as err:
                raise FileFormatError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}") from err
        if not isinstance(doc, dict) or "samples" not in doc:
            raise FileFormatError(f"{path}: expected an object with a 'samples' list")
        samples = []
        for i, entry in enumerate(doc["samples"]):
            try:
                re_part, im_part = entry
                samples.append(complex(float(re_part), float(im_part)))
            except (TypeError, ValueError) as err:
                raise FileFormatError(f"{path}: bad sample at index {i}") from err
        file_sigma = float(doc.get("sigma", 0.0))
        file_dt = float(doc.get("dt", 1.0))
    else:
        samples = []
        file_sigma, file_dt = 0.0, 1.0
        with open(path, newline="") as fh:
            for row_no, row in enumerate(csv.reader(fh), start=1):
                if not row or all(not cell.strip() for cell in row):
                    continue
                try:
                    re_part, im_part = (float(cell) for cell in row[:2])
                except ValueError:
                    if row_no == 1:
                        continue  # header row
                    raise FileFormatError(f"{path}: non-numeric value at row {row_no}") from None
                if len(row) < 2:
                    raise FileFormatError(f"{path}: row {row_no} needs two columns")
                samples.append(complex(re_part, im_part))
    if not samples:
        raise FileFormatError(f"{path}: no samples")
    return SignalSeries(
        np.asarray(samples, dtype=np.complex128),
        sigma=file_sigma if sigma is None else sigma,
        dt=file_dt if dt is None else dt,
    )


def write_series(series: SignalSeries, path, fmt: str | None = None) -> None:
    kind = _detect_format(path, fmt)
    if kind == "json":
        doc = {
            "sigma": series.sigma,
            "dt": series.dt,
            "samples": [[a.real, a.imag] for a in series.samples],
        }
        with open(path, "w") as fh:
            json.dump(doc, fh)
            fh.write("\n")
    else:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["re", "im"])
            for a in series.samples:
                writer.writerow([repr(a.real), repr(a.imag)])


def _read_pairs(path) -> np.ndarray:
    values = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 2:
                raise FileFormatError(f"{path}: line {line_no} needs two columns")
            try:
                values.append(complex(float(parts[0]), float(parts[1])))
            except ValueError:
                raise FileFormatError(f"{path}: non-numeric value at line {line_no}") from None
    return np.asarray(values, dtype=np.complex128)


def _write_pairs(values, path) -> None:
    with open(path, "w") as fh:
        for v in np.asarray(values, dtype=np.complex128):
            fh.write(f"{v.real!r} {v.imag!r}\n")


def read_polygon(path) -> Polygon:
    return Polygon(_read_pairs(path))


def write_polygon(polygon: Polygon, path) -> None:
    _write_pairs(polygon.vertices, path)


def read_moments(path, sigma: float = 0.0) -> MomentSequence:
    return MomentSequence(_read_pairs(path), sigma=sigma)


def write_moments(moments: MomentSequence, path) -> None:
    _write_pairs(moments.moments, path)


def read_model(path) -> ExponentialModel:
    """Model file: one ``c_re c_im xi_re xi_im`` line per term."""
    weights = []
    nodes = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            parts = text.split()
            if len(parts) != 4:
                raise FileFormatError(f"{path}: line {line_no} needs four columns")
            try:
                c_re, c_im, x_re, x_im = (float(p) for p in parts)
            except ValueError:
                raise FileFormatError(f"{path}: non-numeric value at line {line_no}") from None
            weights.append(complex(c_re, c_im))
            nodes.append(complex(x_re, x_im))
    return ExponentialModel(
        weights=np.asarray(weights, dtype=np.complex128),
        nodes=np.asarray(nodes, dtype=np.complex128),
    )


def write_model(model: ExponentialModel, path) -> None:
    with open(path, "w") as fh:
        for c, x in zip(model.weights, model.nodes):
            fh.write(f"{c.real!r} {c.imag!r} {x.real!r} {x.imag!r}\n")


def write_density_grid(dmap: DensityMap, path) -> None:
    """Header ``nx ny x_min x_max y_min y_max`` then row-major values."""
    lat = dmap.lattice
    with open(path, "w") as fh:
        fh.write(
            f"{lat.nx} {lat.ny} {lat.x_min!r} {lat.x_max!r} {lat.y_min!r} {lat.y_max!r}\n"
        )
        for row in dmap.values:
            fh.write(" ".join(repr(v) for v in row))
            fh.write("\n")


def read_density_grid(path) -> DensityMap:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 6:
            raise FileFormatError(f"{path}: header needs six fields")
        nx, ny = int(header[0]), int(header[1])
        x_min, x_max, y_min, y_max = (float(v) for v in header[2:])
        flat = []
        for line in fh:
            flat.extend(float(v) for v in line.split())
    if len(flat) != nx * ny:
        raise FileFormatError(f"{path}: expected {nx * ny} values, found {len(flat)}")
    lattice = Lattice(x_min=x_min, x_max=x_max, y_min=y_min, y_max=y_max, nx=nx, ny=ny)
    values = np.asarray(flat, dtype=float).reshape(nx, ny)
    total = float(values[1:-1, 1:-1].sum() * lattice.dx * lattice.dy)
    return DensityMap(lattice=lattice, values=values, total_mass=total)


def results_document(report: ClusterReport, resid: ResidualReport | None, manifest: dict) -> dict:
    """Assemble the estimation-results JSON document."""
    terms = []
    for info in report.clusters:
        if not info.selected:
            continue
        terms.append(
            [
                info.mean_weight.real,
                info.mean_weight.imag,
                info.centroid.real,
                info.centroid.imag,
                info.laplacian_mass.real,
                info.laplacian_mass.imag,
                len(info.member_refs),
            ]
        )
    doc = {
        "schema_version": SCHEMA_VERSION,
        "p_hat": report.p_hat,
        "terms": terms,
        "exceed_count": None if resid is None else resid.exceed_count,
        "mse": None if resid is None else resid.mse,
        "manifest": manifest,
    }
    return doc


def write_results(doc: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def read_results(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
