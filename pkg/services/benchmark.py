"""
Benchmark suites: MSD tables for curves and surfaces, outlier damping of the reduced data,
and interior identification on the punched sphere.

Every run appends one row to `runs.csv` as soon as it finishes, so an interrupted or
failing suite keeps its completed runs. `summary.csv` aggregates them per setting and
method.
"""

import csv
import importlib
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from services import dataset
from services import gluing
from services import interior
from services import pme
from services.errors import ConfigError, PmeError, SelectionError
from services.hdmde import hdmde, outlier_weight_ratio
from services.pme import PmeOptions

# services/__init__ re-exports the isomap() function under the submodule's name
isomap_service = importlib.import_module("services.isomap")

# Настройка логирования
logger = logging.getLogger(__name__)

SUITES = ("plane-curves", "space-manifolds", "outliers", "sphere")
PLANE_CURVE_SETTINGS = ("lobed-arc", "sine-wave", "three-quarter-circle", "gaussian-cosine")
SPACE_SETTINGS = ("twisted-cubic", "helix", "rotated-paraboloid")

DESK_SIZES = {"plane-curves": 300, "space-manifolds": 300, "outliers": (500, 1000, 2000), "sphere": 2000}
FULL_SIZES = {"plane-curves": 1000, "space-manifolds": 1000, "outliers": (1000, 5000, 10000), "sphere": 10000}
DESK_SPHERE_GRID = 40
FULL_SPHERE_GRID = 60
OUTLIER_RADIUS = 0.2
DEFAULT_CLOSED_LAMBDA = math.exp(-6)

RUN_COLUMNS = ["suite", "setting", "method", "run", "seed", "n", "value", "itr", "lam", "status", "error"]
SUMMARY_COLUMNS = ["setting", "method", "mean", "sd", "itr"]


@dataclass
class SuiteOptions:
    """
    Settings of a benchmark invocation.

    `n` overrides the suite's sample size (for the outlier suite, all three sizes are
    replaced by this one). `closed_lambda` is the piece smoothing of the sphere suite;
    None selects it per piece.
    """

    runs: int = 10
    seed: int = 0
    full: bool = False
    n: Optional[int] = None
    noise: str = "sd"
    lambda_grid: Optional[List[float]] = None
    closed_lambda: Optional[float] = DEFAULT_CLOSED_LAMBDA
    n_pieces: int = 6
    k_votes: int = interior.DEFAULT_VOTES
    pme: PmeOptions = field(default_factory=PmeOptions)


@dataclass
class BenchmarkReport:
    suite: str
    rows: List[Dict] = field(default_factory=list)
    summary: List[Dict] = field(default_factory=list)

    @property
    def failures(self) -> int:
        return sum(1 for row in self.rows if row["status"] != "ok")


class _RunWriter:
    """Appends run rows to a CSV, writing the header once."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="") as handle:
            csv.DictWriter(handle, fieldnames=RUN_COLUMNS).writeheader()

    def write(self, row: Dict) -> None:
        with self.path.open("a", encoding="utf-8", newline="") as handle:
            csv.DictWriter(handle, fieldnames=RUN_COLUMNS).writerow(row)


def _row(suite, setting, method, run, seed, n, value=float("nan"), itr=float("nan"), lam=float("nan"),
         status="ok", error=""):
    return {"suite": suite, "setting": setting, "method": method, "run": run, "seed": seed, "n": n,
            "value": value, "itr": itr, "lam": lam, "status": status, "error": error}


def summarize(rows: Sequence[Dict]) -> List[Dict]:
    """Mean, sample sd and mean iteration count per (setting, method), over successful runs."""
    groups: Dict = {}
    for row in rows:
        if row["status"] == "ok":
            groups.setdefault((row["setting"], row["method"]), []).append(row)
    summary = []
    for (setting, method), members in groups.items():
        values = np.array([r["value"] for r in members], dtype=float)
        itrs = np.array([r["itr"] for r in members], dtype=float)
        summary.append({
            "setting": setting,
            "method": method,
            "mean": float(values.mean()),
            "sd": float(values.std(ddof=1)) if values.size > 1 else 0.0,
            "itr": float(np.nanmean(itrs)) if np.any(np.isfinite(itrs)) else float("nan"),
        })
    return summary


def _write_summary(summary: List[Dict], path: Path) -> None:
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SUMMARY_COLUMNS)
        writer.writeheader()
        writer.writerows(summary)


def baseline_select(X, d: int, opts: PmeOptions, grid: Sequence[float]) -> pme.FitResult:
    """ISOMAP baseline at the grid lambda with the smallest MSD; ISOMAP runs once."""
    params = isomap_service.isomap(X, d, k=opts.isomap_k, threads=opts.threads)
    best = None
    for lam in grid:
        try:
            fit = pme.baseline_isomap_fit(X, d, lam, opts, params=params)
        except PmeError as e:
            logger.warning(f"baseline at lambda={lam:.4g} failed: {e}")
            continue
        if best is None or fit.msd <= best.msd:
            best = fit
    if best is None:
        raise SelectionError("every lambda failed for the ISOMAP baseline", [])
    return best


def _options_for(opts: PmeOptions, d: int) -> PmeOptions:
    return replace(opts, d=d)


def _msd_runs(suite: str, settings, options: SuiteOptions) -> List[Callable[[], List[Dict]]]:
    n = options.n or (FULL_SIZES if options.full else DESK_SIZES)[suite]
    grid = options.lambda_grid or pme.default_lambda_grid()
    tasks = []
    for setting in settings:
        for run in range(options.runs):
            seed = options.seed + run

            def task(setting=setting, run=run, seed=seed):
                cloud = dataset.generate(dataset.GeneratorSpec(setting, n, seed=seed, noise=options.noise))
                opts = _options_for(options.pme, dataset.setting_dimension(setting))
                rows = []
                try:
                    lam, fit = pme.select_lambda(cloud.points, opts, grid)
                    rows.append(_row(suite, setting, "PME", run, seed, n, fit.msd, fit.n_iter, lam))
                except PmeError as e:
                    rows.append(_row(suite, setting, "PME", run, seed, n, status="error", error=str(e)))
                try:
                    base = baseline_select(cloud.points, opts.d, opts, grid)
                    rows.append(_row(suite, setting, "ISOMAP-baseline", run, seed, n, base.msd, 1, base.lam))
                except PmeError as e:
                    rows.append(_row(suite, setting, "ISOMAP-baseline", run, seed, n, status="error", error=str(e)))
                return rows

            tasks.append(task)
    return tasks


def _outlier_runs(options: SuiteOptions) -> List[Callable[[], List[Dict]]]:
    sizes = (options.n,) if options.n else (FULL_SIZES if options.full else DESK_SIZES)["outliers"]
    opts = options.pme
    tasks = []
    for n in sizes:
        for run in range(options.runs):
            seed = options.seed + run

            def task(n=n, run=run, seed=seed):
                setting = f"circle-with-outliers/I={n}"
                try:
                    cloud = dataset.generate(dataset.GeneratorSpec("circle-with-outliers", n, seed=seed,
                                                                   noise=options.noise))
                    waj, trace = hdmde(cloud.points, n0=opts.n0, alpha=opts.alpha, eps=opts.eps,
                                       max_iter=opts.max_em_iter, n_max=opts.n_max, seed=seed)
                    ratio = outlier_weight_ratio(waj, np.zeros(2), OUTLIER_RADIUS)
                    return [_row("outliers", setting, "HDMDE", run, seed, n, ratio, len(trace))]
                except PmeError as e:
                    return [_row("outliers", setting, "HDMDE", run, seed, n, status="error", error=str(e))]

            tasks.append(task)
    return tasks


def _sphere_runs(options: SuiteOptions) -> List[Callable[[], List[Dict]]]:
    n = options.n or (FULL_SIZES if options.full else DESK_SIZES)["sphere"]
    resolution = FULL_SPHERE_GRID if options.full else DESK_SPHERE_GRID
    opts = _options_for(options.pme, 2)
    tasks = []
    for run in range(options.runs):
        seed = options.seed + run

        def task(run=run, seed=seed):
            try:
                cloud = dataset.generate(dataset.GeneratorSpec("punched-sphere-noiseless", n, seed=seed))
                grid, truth = dataset.sphere_truth_grid(resolution)
                cf = gluing.fit_closed(cloud.points, options.n_pieces, opts, lam=options.closed_lambda,
                                       lambda_grid=options.lambda_grid)
                labels = interior.classify_grid(cf, np.zeros(3), grid, options.k_votes, threads=opts.threads)
                rate = interior.error_rate(labels, truth)
                itr = float(np.mean([fit.n_iter for fit in cf.fits]))
                return [_row("sphere", "punched-sphere-noiseless", "PME-closed", run, seed, n, rate, itr,
                             options.closed_lambda if options.closed_lambda is not None else float("nan"))]
            except PmeError as e:
                return [_row("sphere", "punched-sphere-noiseless", "PME-closed", run, seed, n,
                             status="error", error=str(e))]

        tasks.append(task)
    return tasks


def run_suite(suite: str, out_dir, options: Optional[SuiteOptions] = None, progress: bool = True) -> BenchmarkReport:
    """
    Runs a benchmark suite and writes `runs.csv` and `summary.csv` into out_dir.

    Args:
        suite: One of SUITES.
        out_dir: Output directory.
        options: Sizes, seeds and fit options.
        progress: Show a progress bar on stderr.

    Returns:
        BenchmarkReport: All run rows and the summary; `failures` counts failed runs.
    """
    options = options or SuiteOptions()
    if suite not in SUITES:
        raise ConfigError(f"unknown suite '{suite}'; choose one of {', '.join(SUITES)}")
    if options.runs < 1:
        raise ConfigError("runs must be positive")
    out_dir = Path(out_dir)
    writer = _RunWriter(out_dir / "runs.csv")

    if suite == "plane-curves":
        tasks = _msd_runs(suite, PLANE_CURVE_SETTINGS, options)
    elif suite == "space-manifolds":
        tasks = _msd_runs(suite, SPACE_SETTINGS, options)
    elif suite == "outliers":
        tasks = _outlier_runs(options)
    else:
        tasks = _sphere_runs(options)

    report = BenchmarkReport(suite=suite)
    for task in tqdm(tasks, desc=f"benchmark {suite}", unit="run", disable=not progress):
        for row in task():
            writer.write(row)
            report.rows.append(row)
            if row["status"] != "ok":
                logger.warning(f"{suite}: {row['setting']} {row['method']} run {row['run']} failed: {row['error']}")

    report.summary = summarize(report.rows)
    _write_summary(report.summary, out_dir / "summary.csv")
    logger.info(f"benchmark {suite}: {len(report.rows)} rows, {report.failures} failures, written to {out_dir}")
    return report
