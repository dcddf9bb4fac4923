"""
File formats: fitted maps, fit summaries, reduced data, grid labels, meshes and closed-fit
directories.

Numeric CSVs use 17 significant digits so that a map read back evaluates to the same
values. Tagged CSVs carry the block name in the first column.
"""

import csv
import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from services.errors import ConfigError, DataFormatError, UnsupportedFormatError
from services.gluing import ClosedFit, GlueJunction, glue_eval_many
from services.hdmde import Waj, ZReport
from services.interior import GridLabels
from services.pme import FitResult
from services.projection import search_box, ProjectionOptions
from services.spline import SplineMap

# Настройка логирования
logger = logging.getLogger(__name__)

MESH_RESOLUTION = 30


def _fmt(value: float) -> str:
    return "%.17g" % value


def _write_tagged(path: Path, header: List[str], blocks: List[Tuple[str, np.ndarray]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        for line in header:
            handle.write(f"# {line}\n")
        writer = csv.writer(handle)
        for tag, values in blocks:
            for row in np.atleast_2d(values):
                writer.writerow([tag] + [_fmt(v) for v in row])


def _read_tagged(path: Path) -> Tuple[Dict[str, str], Dict[str, np.ndarray]]:
    """Returns the `key=value` header entries and the stacked rows of every tag."""
    meta: Dict[str, str] = {}
    rows: Dict[str, List[List[float]]] = {}
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        for line_no, row in enumerate(csv.reader(handle), start=1):
            if not row:
                continue
            if row[0].startswith("#"):
                for item in ",".join(row)[1:].split(","):
                    if "=" in item:
                        key, value = item.split("=", 1)
                        meta[key.strip()] = value.strip()
                continue
            try:
                rows.setdefault(row[0], []).append([float(v) for v in row[1:]])
            except ValueError as e:
                raise DataFormatError(f"non-numeric value: {e}", line=line_no, path=str(path)) from e
    return meta, {tag: np.array(values, dtype=float) for tag, values in rows.items()}


# ---------------------------------------------------------------------------
# Spline maps and fit results


def save_spline_map(f: SplineMap, path) -> None:
    """Writes centers, kernel coefficients and affine coefficients as tagged rows."""
    _write_tagged(
        Path(path),
        [f"d={f.d},D={f.D},n_centers={f.n_centers}"],
        [("center", f.centers), ("s", f.s), ("a", f.a)],
    )


def load_spline_map(path) -> SplineMap:
    meta, blocks = _read_tagged(Path(path))
    try:
        d, dim = int(meta["d"]), int(meta["D"])
        centers, s, a = blocks["center"], blocks["s"], blocks["a"]
    except KeyError as e:
        raise DataFormatError(f"spline file lacks {e}", path=str(path)) from e
    if centers.shape[1] != d or s.shape != (centers.shape[0], dim) or a.shape != (d + 1, dim):
        raise DataFormatError("spline blocks have inconsistent shapes", path=str(path))
    return SplineMap(centers=centers, s=s, a=a)


class FitSummary(BaseModel):
    """Scalar diagnostics of a fit, stored next to its map."""

    # failed grid points carry NaN
    model_config = ConfigDict(ser_json_inf_nan="constants")

    lam: float
    log_lam: Optional[float] = None
    msd: float
    n_iter: int
    converged: bool
    returned_iterate: int
    flag: Optional[str] = None
    weighted_msd_trace: List[float]
    grid_msd: List[Tuple[float, float]] = []
    n_nodes: Optional[int] = None
    sigma: Optional[float] = None


def fit_summary(fit: FitResult) -> FitSummary:
    return FitSummary(
        lam=fit.lam,
        log_lam=math.log(fit.lam) if fit.lam > 0 else None,
        msd=fit.msd,
        n_iter=fit.n_iter,
        converged=fit.converged,
        returned_iterate=fit.returned_iterate,
        flag=fit.flag,
        weighted_msd_trace=list(fit.weighted_msd_trace),
        grid_msd=[(float(lam), float(value)) for lam, value in fit.grid_msd],
        n_nodes=fit.waj.n if fit.waj is not None else None,
        sigma=fit.waj.sigma if fit.waj is not None else None,
    )


def save_fit(fit: FitResult, directory) -> Path:
    """Writes `spline.csv`, `fit.json` and, when present, `waj.csv` into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_spline_map(fit.f, directory / "spline.csv")
    (directory / "fit.json").write_text(fit_summary(fit).model_dump_json(indent=2), encoding="utf-8")
    if fit.waj is not None:
        save_waj(fit.waj, directory / "waj.csv")
    logger.info(f"fit written to {directory}")
    return directory


def load_fit(directory) -> Tuple[SplineMap, FitSummary]:
    directory = Path(directory)
    summary = FitSummary.model_validate_json((directory / "fit.json").read_text(encoding="utf-8"))
    return load_spline_map(directory / "spline.csv"), summary


# ---------------------------------------------------------------------------
# Reduced data


def save_waj(waj: Waj, path) -> None:
    """Node coordinates and weight per row; N, sigma, alpha and N0 in the header."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f"mu{k + 1}" for k in range(waj.D)] + ["theta"]
    header = (
        f"N={waj.n},sigma={_fmt(waj.sigma)},alpha={'' if waj.alpha is None else _fmt(waj.alpha)},"
        f"n0={'' if waj.n0 is None else waj.n0}\n" + ",".join(columns)
    )
    np.savetxt(path, np.hstack([waj.nodes, waj.weights[:, None]]), delimiter=",", fmt="%.17g",
               header=header, comments="# ")


def load_waj(path) -> Waj:
    path = Path(path)
    meta: Dict[str, str] = {}
    with path.open("r", encoding="utf-8") as handle:
        for line in handle:
            if not line.startswith("#"):
                break
            for item in line[1:].strip().split(","):
                if "=" in item:
                    key, value = item.split("=", 1)
                    meta[key] = value
    try:
        data = np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#"))
    except ValueError as e:
        raise DataFormatError(f"unreadable reduced data: {e}", path=str(path)) from e
    if "sigma" not in meta:
        raise DataFormatError("reduced-data header lacks sigma", path=str(path))
    return Waj(
        nodes=data[:, :-1],
        weights=data[:, -1],
        sigma=float(meta["sigma"]),
        alpha=float(meta["alpha"]) if meta.get("alpha") else None,
        n0=int(meta["n0"]) if meta.get("n0") else None,
    )


def save_z_trace(trace: List[ZReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["n", "z", "delta_bar", "s_hat"])
        for report in trace:
            writer.writerow([report.n, _fmt(report.z), _fmt(report.delta_bar), _fmt(report.s_hat)])


# ---------------------------------------------------------------------------
# Grid labels


def save_grid_labels(labels: GridLabels, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"x{k + 1}" for k in range(labels.points.shape[1])] + ["label", "provenance"])
        for point, label, prov in zip(labels.points, labels.labels, labels.provenance):
            writer.writerow([_fmt(v) for v in point] + [int(label), prov])


def load_grid_labels(path) -> GridLabels:
    points, labels, provenance = [], [], []
    with Path(path).open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        next(reader, None)
        for line_no, row in enumerate(reader, start=2):
            try:
                points.append([float(v) for v in row[:-2]])
                labels.append(int(row[-2]))
            except (ValueError, IndexError) as e:
                raise DataFormatError(f"bad grid-label row: {e}", line=line_no, path=str(path)) from e
            provenance.append(row[-1])
    if not points:
        raise DataFormatError("no data rows", path=str(path))
    return GridLabels(points=np.array(points), labels=np.array(labels), provenance=np.array(provenance, dtype=object))


# ---------------------------------------------------------------------------
# Meshes


def _grid_faces(resolution: int, valid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Triangles of a resolution x resolution vertex grid over valid vertices; returns (kept vertex ids, faces)."""
    index = np.arange(resolution * resolution).reshape(resolution, resolution)
    a, b = index[:-1, :-1].ravel(), index[1:, :-1].ravel()
    c, e = index[1:, 1:].ravel(), index[:-1, 1:].ravel()
    faces = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, e])])
    faces = faces[np.all(valid[faces], axis=1)]
    kept = np.flatnonzero(valid)
    renumber = np.full(valid.shape[0], -1)
    renumber[kept] = np.arange(kept.size)
    return kept, renumber[faces]


def write_obj(vertices: np.ndarray, faces: np.ndarray, path) -> None:
    """Wavefront OBJ with 1-based face indices."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as handle:
        for v in vertices:
            handle.write("v " + " ".join(_fmt(x) for x in v) + "\n")
        for face in faces:
            handle.write("f " + " ".join(str(int(i) + 1) for i in face) + "\n")


def load_mesh(path) -> Tuple[np.ndarray, np.ndarray]:
    """Reads vertices and 0-based faces of an OBJ written by `write_obj`."""
    vertices, faces = [], []
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                if parts[0] == "v":
                    vertices.append([float(x) for x in parts[1:]])
                elif parts[0] == "f":
                    faces.append([int(x.split("/")[0]) - 1 for x in parts[1:]])
            except ValueError as e:
                raise DataFormatError(f"bad mesh line: {e}", line=line_no, path=str(path)) from e
    return np.array(vertices, dtype=float), np.array(faces, dtype=int).reshape(-1, 3)


def _require_surface(d: int, dim: int) -> None:
    if (d, dim) != (2, 3):
        raise UnsupportedFormatError(f"mesh export needs a surface in R^3, got d={d}, D={dim}")


def save_mesh(f: SplineMap, path, resolution: int = MESH_RESOLUTION) -> None:
    """Triangulates f over the box spanned by its centers."""
    _require_surface(f.d, f.D)
    lo, hi = search_box(f, ProjectionOptions(inflate=0.0))
    s1, s2 = np.meshgrid(np.linspace(lo[0], hi[0], resolution), np.linspace(lo[1], hi[1], resolution), indexing="ij")
    vertices = f.evaluate(np.column_stack([s1.ravel(), s2.ravel()]))
    kept, faces = _grid_faces(resolution, np.ones(resolution * resolution, dtype=bool))
    write_obj(vertices[kept], faces, path)


def save_glue_mesh(cf: ClosedFit, k: int, path, resolution: int = MESH_RESOLUTION) -> int:
    """
    Triangulates the blended map of junction k over its box.

    Vertices where a chart cannot be inverted are dropped with their faces.

    Returns:
        int: Number of dropped vertices.
    """
    junction = cf.junctions[k]
    _require_surface(junction.d, junction.R.shape[0])
    z1, z2 = np.meshgrid(
        np.linspace(junction.box_lo[0], junction.box_hi[0], resolution),
        np.linspace(junction.box_lo[1], junction.box_hi[1], resolution),
        indexing="ij",
    )
    f1, f2 = cf.pair(k)
    values, ok = glue_eval_many(f1, f2, junction, np.column_stack([z1.ravel(), z2.ravel()]))
    kept, faces = _grid_faces(resolution, ok)
    write_obj(values[kept], faces, path)
    dropped = int((~ok).sum())
    if dropped:
        logger.warning(f"glue mesh {k}: dropped {dropped} vertices where chart inversion failed")
    return dropped


# ---------------------------------------------------------------------------
# Closed fits


def save_junction(junction: GlueJunction, path) -> None:
    _write_tagged(
        Path(path),
        [f"g={junction.g + 1},d={junction.d},D={junction.R.shape[0]}"],
        [
            ("R", junction.R),
            ("box_lo", junction.box_lo),
            ("box_hi", junction.box_hi),
            ("xi1", junction.xi1),
            ("xi2", junction.xi2),
            ("lift", junction.lift),
            ("data_lo", junction.data_lo),
            ("data_hi", junction.data_hi),
            ("centroid", junction.centroid),
        ],
    )


def load_junction(path) -> GlueJunction:
    meta, blocks = _read_tagged(Path(path))
    try:
        return GlueJunction(
            R=blocks["R"],
            g=int(meta["g"]) - 1,
            d=int(meta["d"]),
            box_lo=blocks["box_lo"][0],
            box_hi=blocks["box_hi"][0],
            xi1=blocks["xi1"][0],
            xi2=blocks["xi2"][0],
            lift=blocks["lift"][0],
            data_lo=blocks["data_lo"][0],
            data_hi=blocks["data_hi"][0],
            centroid=blocks["centroid"][0],
        )
    except KeyError as e:
        raise DataFormatError(f"junction file lacks {e}", path=str(path)) from e


class ClosedFitManifest(BaseModel):
    n_pieces: int
    d: int
    D: int
    pieces: List[str]
    junctions: List[str]
    lambdas: List[float] = []


def save_closed_fit(cf: ClosedFit, directory, meshes: bool = True) -> Path:
    """
    Writes piece maps, junctions, the per-point partition and a ring manifest.

    Surfaces in R^3 also get `piece_k.obj` and `glue_k.obj` meshes.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    pieces, junctions = [], []
    for k, (f, junction) in enumerate(zip(cf.pieces, cf.junctions)):
        pieces.append(f"piece_{k}.csv")
        junctions.append(f"junction_{k}.csv")
        save_spline_map(f, directory / pieces[-1])
        save_junction(junction, directory / junctions[-1])
    np.savetxt(directory / "partition.csv", cf.partition, fmt="%d", header="piece", comments="# ")
    manifest = ClosedFitManifest(
        n_pieces=cf.n_pieces, d=cf.d, D=cf.pieces[0].D, pieces=pieces, junctions=junctions,
        lambdas=[fit.lam for fit in cf.fits],
    )
    (directory / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    if meshes and (cf.d, cf.pieces[0].D) == (2, 3):
        for k in range(cf.n_pieces):
            save_mesh(cf.pieces[k], directory / f"piece_{k}.obj")
            save_glue_mesh(cf, k, directory / f"glue_{k}.obj")
    logger.info(f"closed fit with {cf.n_pieces} pieces written to {directory}")
    return directory


def load_closed_fit(directory) -> ClosedFit:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise DataFormatError("closed-fit directory has no manifest.json", path=str(directory))
    manifest = ClosedFitManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
    partition = np.atleast_1d(np.loadtxt(directory / "partition.csv", dtype=int, comments="#"))
    return ClosedFit(
        pieces=[load_spline_map(directory / name) for name in manifest.pieces],
        junctions=[load_junction(directory / name) for name in manifest.junctions],
        partition=partition,
    )


def export(obj: Union[SplineMap, ClosedFit, GridLabels], path, fmt: str = "csv") -> Path:
    """
    Writes a fitted map, a closed fit or a label set.

    Args:
        obj: What to write.
        path: Target file; a directory for closed fits.
        fmt: "csv", or "obj" for triangle meshes of surfaces in R^3.

    Raises:
        UnsupportedFormatError: For an unknown format or a mesh of anything but a surface in R^3.
    """
    if fmt not in ("csv", "obj"):
        raise UnsupportedFormatError(f"unknown export format: {fmt}")
    path = Path(path)
    if isinstance(obj, SplineMap):
        if fmt == "obj":
            save_mesh(obj, path)
        else:
            save_spline_map(obj, path)
    elif isinstance(obj, ClosedFit):
        if fmt == "obj":
            _require_surface(obj.d, obj.pieces[0].D)
        save_closed_fit(obj, path, meshes=fmt == "obj")
    elif isinstance(obj, GridLabels):
        if fmt == "obj":
            raise UnsupportedFormatError("grid labels have no mesh form")
        save_grid_labels(obj, path)
    else:
        raise ConfigError(f"cannot export {type(obj).__name__}")
    return path
