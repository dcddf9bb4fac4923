"""
Point clouds: CSV ingestion and the synthetic settings used by the benchmarks.
"""

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Optional, Tuple

import numpy as np

from services.errors import ConfigError, DataFormatError

# Настройка логирования
logger = logging.getLogger(__name__)

INTERIOR = 1
EXTERIOR = 0
NO_LABEL = -1

NOISE_CONVENTIONS = ("sd", "variance")


@dataclass
class PointCloud:
    """
    I observed points in R^D with optional per-point tags.

    Attributes:
        points: I x D coordinates.
        slice_ids: Optional per-point slice index.
        labels: Optional per-point truth label (INTERIOR, EXTERIOR or NO_LABEL).
        truth_grid: Optional companion grid with known labels.
        truth_labels: Labels of `truth_grid`.
    """

    points: np.ndarray
    slice_ids: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None
    truth_grid: Optional[np.ndarray] = None
    truth_labels: Optional[np.ndarray] = None
    _latent: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        points = np.asarray(self.points, dtype=float)
        if points.ndim != 2 or points.shape[0] < 1:
            raise DataFormatError("a point cloud needs at least one row of coordinates")
        if points.shape[1] < 2:
            raise DataFormatError(f"points must have D >= 2 coordinates, got {points.shape[1]}")
        if not np.all(np.isfinite(points)):
            raise DataFormatError("point coordinates must be finite")
        self.points = points
        for name in ("slice_ids", "labels"):
            value = getattr(self, name)
            if value is not None:
                value = np.asarray(value, dtype=int)
                if value.shape != (points.shape[0],):
                    raise DataFormatError(f"{name} must have one entry per point")
                setattr(self, name, value)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def D(self) -> int:
        return self.points.shape[1]


def latent_parameters(cloud: PointCloud) -> Optional[np.ndarray]:
    """Latent parameters recorded by a generator. Test-only accessor."""
    return cloud._latent


def load_point_cloud(path, slice_column: bool = False, fmt: str = "csv") -> PointCloud:
    """
    Reads a comma-separated point file.

    Args:
        path: File path. Lines starting with '#' and blank lines are skipped.
        slice_column: The last column holds an integer slice id.
        fmt: Only "csv" is supported.

    Returns:
        PointCloud: Rows in file order.

    Raises:
        DataFormatError: On unparsable values, ragged rows or an empty file.
    """
    if fmt != "csv":
        raise ConfigError(f"unsupported point format: {fmt}")
    path = Path(path)
    rows = []
    width = None
    with path.open("r", encoding="utf-8", newline="") as handle:
        for line_no, row in enumerate(csv.reader(handle), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataFormatError(f"expected {width} columns, found {len(row)}", line=line_no, path=str(path))
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise DataFormatError(f"non-numeric value: {e}", line=line_no, path=str(path)) from e
    if not rows:
        raise DataFormatError("no data rows", path=str(path))
    data = np.array(rows, dtype=float)
    if slice_column:
        slices = data[:, -1]
        if not np.all(slices == np.round(slices)):
            raise DataFormatError("slice column must hold integers", path=str(path))
        cloud = PointCloud(points=data[:, :-1], slice_ids=slices.astype(int))
    else:
        cloud = PointCloud(points=data)
    logger.info(f"loaded {cloud.n} points (D={cloud.D}) from {path}")
    return cloud


def save_point_cloud(cloud: PointCloud, path) -> None:
    """Writes the cloud in the ingestion format (17 significant digits)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = [f"x{k + 1}" for k in range(cloud.D)]
    data = cloud.points
    fmt = ["%.17g"] * cloud.D
    if cloud.slice_ids is not None:
        columns.append("slice")
        data = np.hstack([data, cloud.slice_ids[:, None]])
        fmt.append("%d")
    np.savetxt(path, data, delimiter=",", fmt=fmt, header=",".join(columns), comments="# ")


# ---------------------------------------------------------------------------
# Generators


@dataclass
class GeneratorSpec:
    """
    Which synthetic setting to draw, how many points and from which seed.

    `noise` selects how the nominal noise scalar is read: "sd" as a standard deviation,
    "variance" as the covariance multiple.
    """

    name: str
    n: int
    seed: int = 0
    noise: str = "sd"

    def __post_init__(self):
        if self.name not in SETTINGS:
            raise ConfigError(f"unknown generator '{self.name}'; choose one of {', '.join(sorted(SETTINGS))}")
        if self.n < 1:
            raise ConfigError("sample count must be positive")
        if self.noise not in NOISE_CONVENTIONS:
            raise ConfigError(f"noise convention must be one of {NOISE_CONVENTIONS}")
        if self.name == "circle-with-outliers" and self.n <= OUTLIER_COUNT:
            raise ConfigError(f"circle-with-outliers needs more than {OUTLIER_COUNT} points")


@dataclass(frozen=True)
class Setting:
    """A latent sampler, the map to R^D and the nominal noise scalar."""

    sample: Callable[[np.random.Generator, int], np.ndarray]
    embed: Callable[[np.ndarray], np.ndarray]
    scale: float
    # the nominal scalar is already a variance (e.g. 0.05^2)
    squared: bool = False
    d: int = 1
    closed: bool = False


def _uniform(lo, hi):
    return lambda rng, n: rng.uniform(lo, hi, size=(n, 1))


def _lobed_quarter(tau):
    t = tau[:, 0]
    r = 1.0 + 0.15 * np.cos(4.0 * t)
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def _surface(tau):
    t1, t2 = tau[:, 0], tau[:, 1]
    r2 = t1 ** 2 + t2 ** 2
    return np.column_stack([t1, 0.5 * (t2 + math.sqrt(3.0) * r2), 0.5 * (r2 - math.sqrt(3.0))])


def _sphere(tau):
    t1, t2 = tau[:, 0], tau[:, 1]
    return np.column_stack([np.sin(t1) * np.cos(t2), np.sin(t1) * np.sin(t2), np.cos(t1)])


def _sphere_band(rng, n):
    return np.column_stack([rng.uniform(math.pi / 4, 3 * math.pi / 4, n), rng.uniform(0.0, 2 * math.pi, n)])


def _circle(tau):
    return np.column_stack([np.cos(tau[:, 0]), np.sin(tau[:, 0])])


SETTINGS: Dict[str, Setting] = {
    "lobed-arc": Setting(_uniform(0.0, math.pi / 2), _lobed_quarter, 0.075),
    "sine-wave": Setting(_uniform(-3 * math.pi, 3 * math.pi), lambda t: np.column_stack([t[:, 0], np.sin(t[:, 0])]), 0.2),
    "three-quarter-circle": Setting(_uniform(0.0, 1.5 * math.pi), _circle, 0.1),
    "gaussian-cosine": Setting(lambda rng, n: rng.standard_normal((n, 1)),
                     lambda t: np.column_stack([t[:, 0], np.cos(t[:, 0])]), 0.15),
    "twisted-cubic": Setting(_uniform(-1.0, 1.0), lambda t: np.column_stack([t[:, 0], t[:, 0] ** 2, t[:, 0] ** 3]), 0.1),
    "helix": Setting(_uniform(math.pi / 2, 6 * math.pi),
                     lambda t: np.column_stack([t[:, 0], np.cos(t[:, 0]), np.sin(t[:, 0])]), 0.05),
    "rotated-paraboloid": Setting(lambda rng, n: rng.uniform(-1.0, 1.0, size=(n, 2)), _surface, 0.05, d=2),
    "punched-sphere": Setting(_sphere_band, _sphere, 0.05, d=2, closed=True),
    "punched-sphere-noiseless": Setting(_sphere_band, _sphere, 0.0, d=2, closed=True),
    "glue-parabola-2d": Setting(_uniform(1.0, 4.0), lambda t: np.column_stack([t[:, 0], t[:, 0] ** 2]), 1.0),
    "glue-paraboloid-3d": Setting(
        lambda rng, n: np.column_stack([rng.uniform(2.0, 4.0, n), rng.uniform(2.0, 6.0, n)]),
        lambda t: np.column_stack([t[:, 0], t[:, 1], t[:, 0] ** 2 + t[:, 1] ** 2]), 0.2, d=2),
    "circle-with-outliers": Setting(_uniform(0.0, 1.5 * math.pi), _circle, 0.05 ** 2, squared=True),
}

OUTLIER_COUNT = 10
SPHERE_GRID_RESOLUTION = 40
SPHERE_GRID_HALF_WIDTH = 1.2


def setting_dimension(name: str) -> int:
    """Intrinsic dimension of a generator setting."""
    if name not in SETTINGS:
        raise ConfigError(f"unknown generator '{name}'")
    return SETTINGS[name].d


def noise_sd(name: str, convention: str = "sd") -> float:
    """Per-coordinate noise standard deviation of a setting under a reading convention."""
    setting = SETTINGS[name]
    if setting.squared or convention == "variance":
        return math.sqrt(setting.scale)
    return setting.scale


def regular_grid(lo, hi, resolution) -> np.ndarray:
    """M x D grid with `resolution` nodes per axis between lo and hi (C order)."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    res = np.broadcast_to(np.asarray(resolution, dtype=int), lo.shape)
    axes = [np.linspace(lo[k], hi[k], int(res[k])) for k in range(lo.shape[0])]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def sphere_truth_grid(resolution: int = SPHERE_GRID_RESOLUTION,
                      half_width: float = SPHERE_GRID_HALF_WIDTH) -> Tuple[np.ndarray, np.ndarray]:
    """Cubic grid around the unit sphere with labels INTERIOR for ||xi|| < 1."""
    grid = regular_grid([-half_width] * 3, [half_width] * 3, resolution)
    labels = np.where(np.linalg.norm(grid, axis=1) < 1.0, INTERIOR, EXTERIOR)
    return grid, labels


def generate(spec: GeneratorSpec) -> PointCloud:
    """
    Draws a synthetic point cloud.

    Points are latent curve/surface values plus isotropic Gaussian noise. The latent
    parameters are kept on the cloud for tests (see `latent_parameters`).
    """
    setting = SETTINGS[spec.name]
    seeds = np.random.SeedSequence(int(spec.seed) & (2 ** 64 - 1)).spawn(2)
    latent_rng = np.random.Generator(np.random.Philox(seeds[0]))
    noise_rng = np.random.Generator(np.random.Philox(seeds[1]))
    sd = noise_sd(spec.name, spec.noise)

    n_curve = spec.n - OUTLIER_COUNT if spec.name == "circle-with-outliers" else spec.n
    tau = setting.sample(latent_rng, n_curve)
    clean = setting.embed(tau)
    labels = None
    if spec.name == "circle-with-outliers":
        # outliers share the latent origin
        clean = np.vstack([clean, np.zeros((OUTLIER_COUNT, 2))])
        tau = np.vstack([tau, np.full((OUTLIER_COUNT, 1), np.nan)])
    points = clean + sd * noise_rng.standard_normal(clean.shape) if sd > 0 else clean.copy()

    cloud = PointCloud(points=points, labels=labels, _latent=tau)
    if setting.closed:
        cloud.truth_grid, cloud.truth_labels = sphere_truth_grid()
    logger.info(f"generated {spec.name}: I={spec.n}, seed={spec.seed}, noise sd={sd:g}")
    return cloud


def latent_curve_points(name: str, tau: np.ndarray) -> np.ndarray:
    """Noise-free points of a setting at given latent parameters."""
    setting = SETTINGS[name]
    tau = np.asarray(tau, dtype=float).reshape(-1, setting.d)
    return setting.embed(tau)


def sphere_slices(n_slices: int = 9, per_slice: int = 60, z_limit: float = 0.8, seed: int = 0) -> PointCloud:
    """
    Slice-tagged boundary rings of the unit sphere at evenly spaced heights.

    Each ring point sits at a random angle, so the per-slice order is not the ring order.
    """
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    heights = np.linspace(-z_limit, z_limit, n_slices)
    rows, slices = [], []
    for k, z in enumerate(heights):
        radius = math.sqrt(max(1.0 - z * z, 0.0))
        angles = rng.uniform(0.0, 2 * math.pi, per_slice)
        rows.append(np.column_stack([radius * np.cos(angles), radius * np.sin(angles), np.full(per_slice, z)]))
        slices.append(np.full(per_slice, k))
    return PointCloud(points=np.vstack(rows), slice_ids=np.concatenate(slices))
