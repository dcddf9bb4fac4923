#!/usr/bin/env python
"""
Command-line front end: generate data, reduce it, fit open and closed manifolds,
label grid points and run the benchmark suites.

Log records and status lines go to stderr; stdout carries one JSON summary line per
command. Exit codes: 0 success, 2 invalid configuration, 3 numerical failure, 4 I/O.
"""

import functools
import importlib
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import click
import numpy as np
from pydantic import ValidationError

import check_config
from config import RunConfig, dump_run_config, load_run_config
from pme_logging import pme_print, setup_pme_logging
from services import benchmark, dataset, export, gluing, interior, pme
from services.errors import ConfigError, PmeError

# services/__init__ re-exports the hdmde() function under the submodule's name
hdmde = importlib.import_module("services.hdmde")

# Настройка логирования
logger = logging.getLogger("pme")

RESOLVED_CONFIG = "resolved_config.env"


def _emit(summary: Dict[str, Any]) -> None:
    click.echo(json.dumps(summary, default=_json_default, allow_nan=True))


def _json_default(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not serializable: {type(value)}")


def pipeline_command(func):
    """Maps library errors to exit codes and emits the JSON summary line."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        name = click.get_current_context().info_name
        try:
            summary = func(*args, **kwargs) or {}
        except PmeError as e:
            code = e.exit_code
            message = str(e)
        except ValidationError as e:
            code = 2
            message = f"invalid configuration: {e}"
        except OSError as e:
            code = 4
            message = f"I/O error: {e}"
        else:
            _emit({"command": name, "status": "ok", **summary})
            return
        logger.error(f"{name} failed: {message}")
        pme_print(message, "ERROR")
        _emit({"command": name, "status": "error", "exit_code": code, "error": message})
        sys.exit(code)

    return wrapper


def _resolve(ctx: click.Context, **overrides) -> RunConfig:
    """Config file + environment + global flags + command flags."""
    values = dict(ctx.obj["overrides"])
    values.update({k: v for k, v in overrides.items() if v is not None})
    config = load_run_config(ctx.obj["config_path"], values)
    setup_pme_logging("pme", config.log_level)
    return config


def _parse_floats(text: str, count: Optional[int] = None) -> np.ndarray:
    try:
        values = np.array([float(v) for v in text.split(",")])
    except ValueError as e:
        raise ConfigError(f"expected comma-separated numbers, got '{text}'") from e
    if count is not None and values.size != count:
        raise ConfigError(f"expected {count} numbers, got {values.size}")
    return values


def parse_grid_spec(spec: str, dim: int) -> np.ndarray:
    """
    Grid from 'lo:hi:n' (shared by every axis) or one 'lo:hi:n' per axis separated by commas.
    """
    parts = spec.split(",")
    if len(parts) == 1:
        parts = parts * dim
    if len(parts) != dim:
        raise ConfigError(f"grid spec needs 1 or {dim} axis entries, got {len(parts)}")
    lo, hi, res = [], [], []
    for part in parts:
        try:
            a, b, n = part.split(":")
            lo.append(float(a))
            hi.append(float(b))
            res.append(int(n))
        except ValueError as e:
            raise ConfigError(f"bad grid axis '{part}', expected lo:hi:n") from e
        if res[-1] < 1 or hi[-1] < lo[-1]:
            raise ConfigError(f"bad grid axis '{part}'")
    return dataset.regular_grid(lo, hi, res)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None, help="KEY=value config file.")
@click.option("--threads", type=int, default=None, help="Worker threads (default: available cores).")
@click.option("--seed", type=int, default=None, help="Base seed.")
@click.option("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR.")
@click.pass_context
def cli(ctx, config_path, threads, seed, log_level):
    """Principal manifold estimation."""
    ctx.ensure_object(dict)
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = {k: v for k, v in {"threads": threads, "seed": seed, "log_level": log_level}.items()
                            if v is not None}


@cli.command()
@click.option("--setting", required=True, help="Generator name.")
@click.option("--n", "n_points", type=int, required=True, help="Sample size I.")
@click.option("--noise", type=click.Choice(["sd", "variance"]), default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
@pipeline_command
def generate(ctx, setting, n_points, noise, out):
    """Draw a synthetic point cloud."""
    config = _resolve(ctx, noise=noise)
    cloud = dataset.generate(dataset.GeneratorSpec(setting, n_points, seed=config.seed, noise=config.noise))
    dataset.save_point_cloud(cloud, out)
    dump_run_config(config, Path(out).parent / RESOLVED_CONFIG)
    pme_print(f"{cloud.n} points of {setting} written to {out}")
    return {"setting": setting, "n": cloud.n, "D": cloud.D, "seed": config.seed, "out": out}


@cli.command("reduce")
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--alpha", type=float, default=None)
@click.option("--n0", type=int, default=None)
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.option("--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
              help="Z trace CSV (default: <out>_ztrace.csv).")
@click.pass_context
@pipeline_command
def reduce_cmd(ctx, in_path, alpha, n0, out, trace_path):
    """Reduce a point cloud to a weighted average joint."""
    config = _resolve(ctx, alpha=alpha, n0=n0)
    cloud = dataset.load_point_cloud(in_path)
    waj, trace = hdmde.hdmde(
        cloud.points, n0=config.n0, alpha=config.alpha, eps=config.eps, max_iter=config.max_em_iter,
        n_max=config.n_max, seed=config.seed, constraint_tol=config.constraint_tol,
    )
    out = Path(out)
    trace_path = Path(trace_path) if trace_path else out.with_name(out.stem + "_ztrace.csv")
    export.save_waj(waj, out)
    export.save_z_trace(trace, trace_path)
    dump_run_config(config, out.parent / RESOLVED_CONFIG)
    pme_print(f"selected N={waj.n}, sigma={waj.sigma:.4g}")
    return {"n_nodes": waj.n, "sigma": waj.sigma, "z_steps": len(trace), "out": str(out), "trace": str(trace_path)}


@cli.command()
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--d", "d", type=int, required=True, help="Intrinsic dimension.")
@click.option("--lambda", "lam", type=float, default=None, help="Smoothing parameter.")
@click.option("--select", is_flag=True, help="Select lambda over the configured grid.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
@pipeline_command
def fit(ctx, in_path, d, lam, select, out):
    """Fit an open principal manifold."""
    if (lam is None) == (not select):
        raise ConfigError("give exactly one of --lambda and --select")
    config = _resolve(ctx)
    cloud = dataset.load_point_cloud(in_path)
    opts = config.pme_options(d)
    if select:
        lam, result = pme.select_lambda(cloud.points, opts, config.lambda_grid())
        k = round(math.log(lam))
        pme_print(f"selected lambda=exp({k})={lam:.6g}")
    else:
        result = pme.pme_fit(cloud.points, lam, opts)
        k = round(math.log(lam)) if lam > 0 else None
    export.save_fit(result, out)
    dump_run_config(config, Path(out) / RESOLVED_CONFIG)
    return {"lambda": lam, "k": k, "msd": result.msd, "n_iter": result.n_iter, "converged": result.converged,
            "flag": result.flag, "out": out}


@cli.command("fit-closed")
@click.option("--in", "in_path", type=click.Path(dir_okay=False), required=True)
@click.option("--pieces", type=int, default=None)
@click.option("--d", "d", type=int, default=2)
@click.option("--lambda", "lam", type=float, default=None, help="Piece smoothing (default: selected per piece).")
@click.option("--glue-axis", type=int, default=None)
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
@pipeline_command
def fit_closed(ctx, in_path, pieces, d, lam, glue_axis, out):
    """Fit a closed manifold as a glued ring of pieces."""
    config = _resolve(ctx, n_pieces=pieces, closed_lambda=lam, glue_axis=glue_axis)
    cloud = dataset.load_point_cloud(in_path)
    cf = gluing.fit_closed(
        cloud.points, config.n_pieces, config.pme_options(d), lam=config.closed_lambda,
        lambda_grid=config.lambda_grid(), glue_axis=config.glue_axis,
    )
    export.save_closed_fit(cf, out)
    dump_run_config(config, Path(out) / RESOLVED_CONFIG)
    return {"n_pieces": cf.n_pieces, "lambdas": [fit.lam for fit in cf.fits],
            "glue_axes": [j.g + 1 for j in cf.junctions], "out": out}


@cli.command("interior")
@click.option("--model", "model_dir", type=click.Path(file_okay=False), default=None, help="Closed-fit directory.")
@click.option("--ref", default=None, help="Reference point x,y,z on the interior side.")
@click.option("--grid", "grid_spec", required=True, help="lo:hi:n shared, or one per axis separated by commas.")
@click.option("--naive", is_flag=True, help="Slice-scan labels from slice-tagged --in data.")
@click.option("--in", "in_path", type=click.Path(dir_okay=False), default=None, help="Slice-tagged boundary points.")
@click.option("--truth", is_flag=True, help="Report the error rate against the unit-ball labels.")
@click.option("--out", type=click.Path(dir_okay=False), required=True)
@click.pass_context
@pipeline_command
def interior_cmd(ctx, model_dir, ref, grid_spec, naive, in_path, truth, out):
    """Label grid points interior or exterior."""
    config = _resolve(ctx)
    out = Path(out)
    summary: Dict[str, Any] = {"out": str(out)}
    labels = naive_labels = None

    if naive:
        if in_path is None:
            raise ConfigError("--naive needs slice-tagged --in data")
        cloud = dataset.load_point_cloud(in_path, slice_column=True)
        if len(grid_spec.split(",")) == 2:
            # in-plane grid repeated at every slice height
            plane = parse_grid_spec(grid_spec, 2)
            heights = [float(cloud.points[cloud.slice_ids == s, -1].mean()) for s in np.unique(cloud.slice_ids)]
            grid = np.vstack([np.column_stack([plane, np.full(plane.shape[0], h)]) for h in heights])
        else:
            grid = parse_grid_spec(grid_spec, cloud.D)
        naive_labels = interior.naive_slice_interior(cloud, grid)
        summary["naive_counts"] = naive_labels.counts()

    if model_dir is not None:
        if ref is None:
            raise ConfigError("--model needs a reference point --ref")
        cf = export.load_closed_fit(model_dir)
        dim = cf.pieces[0].D
        grid = naive_labels.points if naive_labels is not None else parse_grid_spec(grid_spec, dim)
        labels = interior.classify_grid(cf, _parse_floats(ref, dim), grid, config.k_votes,
                                        config.projection_options(), config.resolved_threads())
        summary["counts"] = labels.counts()
    elif not naive:
        raise ConfigError("give --model with --ref, or --naive with --in")

    primary = labels if labels is not None else naive_labels
    export.save_grid_labels(primary, out)
    if labels is not None and naive_labels is not None:
        export.save_grid_labels(naive_labels, out.with_name(out.stem + "_naive.csv"))
        summary["agreement"] = interior.agreement(labels, naive_labels)
        pme_print(f"agreement between methods: {summary['agreement']:.4f}")
    if truth:
        truth_labels = np.where(np.linalg.norm(primary.points, axis=1) < 1.0, dataset.INTERIOR, dataset.EXTERIOR)
        summary["error_rate"] = interior.error_rate(primary, truth_labels)
        pme_print(f"error rate vs unit ball: {summary['error_rate']:.5f}")
    dump_run_config(config, out.parent / RESOLVED_CONFIG)
    return summary


@cli.command("benchmark")
@click.option("--suite", type=click.Choice(list(benchmark.SUITES)), required=True)
@click.option("--runs", type=int, default=10)
@click.option("--n", "n_points", type=int, default=None, help="Override the suite sample size.")
@click.option("--full", is_flag=True, help="Full-size runs.")
@click.option("--out", type=click.Path(file_okay=False), required=True)
@click.pass_context
@pipeline_command
def benchmark_cmd(ctx, suite, runs, n_points, full, out):
    """Run a benchmark suite."""
    config = _resolve(ctx)
    options = benchmark.SuiteOptions(
        runs=runs, seed=config.seed, full=full, n=n_points, noise=config.noise,
        lambda_grid=config.lambda_grid(),
        closed_lambda=config.closed_lambda if config.closed_lambda is not None else benchmark.DEFAULT_CLOSED_LAMBDA,
        n_pieces=config.n_pieces, k_votes=config.k_votes, pme=config.pme_options(1),
    )
    dump_run_config(config, Path(out) / RESOLVED_CONFIG)
    report = benchmark.run_suite(suite, out, options)
    if report.failures:
        raise PmeError(f"{report.failures} of {len(report.rows)} benchmark runs failed; partial results kept")
    return {"suite": suite, "rows": len(report.rows), "summary": report.summary, "out": out}


@cli.command("check-config")
@click.pass_context
@pipeline_command
def check_config_cmd(ctx):
    """Report dependencies, cores and the resolved configuration."""
    report = check_config.run_checks(ctx.obj["config_path"])
    check_config.print_report(report)
    if report["config_error"]:
        raise ConfigError(report["config_error"])
    return {"ok": report["ok"], "missing_modules": report["missing_modules"], "cores": report["cores"]}


if __name__ == "__main__":
    cli(obj={})
