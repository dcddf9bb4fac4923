"""
Tests for the command-line front end.
"""

import json
import os

import numpy as np
import pytest
from click.testing import CliRunner

from main import cli, parse_grid_spec
from services.dataset import save_point_cloud, sphere_slices
from services.errors import ConfigError
from services.export import save_closed_fit


@pytest.fixture(autouse=True)
def isolated(monkeypatch, tmp_path):
    for key in list(os.environ):
        if key.startswith("PME_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


def _run(*args):
    result = CliRunner(mix_stderr=False).invoke(cli, list(args), obj={})
    lines = result.stdout.strip().splitlines()
    summary = json.loads(lines[-1]) if lines else None
    return result, summary


def test_generate(tmp_path):
    out = tmp_path / "data" / "three-quarter-circle.csv"
    result, summary = _run("--seed", "4", "generate", "--setting", "three-quarter-circle", "--n", "50", "--out", str(out))
    assert result.exit_code == 0
    assert summary["status"] == "ok"
    assert summary["n"] == 50 and summary["seed"] == 4
    assert out.exists()
    assert "SEED=4" in (tmp_path / "data" / "resolved_config.env").read_text(encoding="utf-8")


def test_exit_codes(tmp_path):
    result, summary = _run("generate", "--setting", "nope", "--n", "50", "--out", str(tmp_path / "x.csv"))
    assert result.exit_code == 2
    assert summary["status"] == "error" and summary["exit_code"] == 2

    result, _ = _run("reduce", "--in", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "waj.csv"))
    assert result.exit_code == 4

    bad = tmp_path / "bad.csv"
    bad.write_text("1,2\n3\n", encoding="utf-8")
    result, summary = _run("reduce", "--in", str(bad), "--out", str(tmp_path / "waj.csv"))
    assert result.exit_code == 4
    assert "line 2" in summary["error"]

    result, _ = _run("--threads", "0", "generate", "--setting", "three-quarter-circle", "--n", "50", "--out", str(tmp_path / "y.csv"))
    assert result.exit_code == 2


def test_fit_needs_exactly_one_lambda_mode(tmp_path):
    data = tmp_path / "three-quarter-circle.csv"
    _run("generate", "--setting", "three-quarter-circle", "--n", "50", "--out", str(data))
    result, _ = _run("fit", "--in", str(data), "--d", "1", "--out", str(tmp_path / "fit"))
    assert result.exit_code == 2
    result, _ = _run("fit", "--in", str(data), "--d", "1", "--lambda", "1", "--select", "--out", str(tmp_path / "fit"))
    assert result.exit_code == 2


def test_reduce_and_fit(tmp_path):
    data = tmp_path / "three-quarter-circle.csv"
    _run("generate", "--setting", "three-quarter-circle", "--n", "200", "--out", str(data))

    result, summary = _run("reduce", "--in", str(data), "--n0", "10", "--out", str(tmp_path / "waj.csv"))
    assert result.exit_code == 0
    assert summary["n_nodes"] >= 10
    assert (tmp_path / "waj_ztrace.csv").exists()

    result, summary = _run("fit", "--in", str(data), "--d", "1", "--lambda", "0.1", "--out", str(tmp_path / "fit"))
    assert result.exit_code == 0
    assert summary["k"] == -2
    assert summary["msd"] > 0
    assert (tmp_path / "fit" / "spline.csv").exists()
    assert (tmp_path / "fit" / "resolved_config.env").exists()


def test_naive_interior(tmp_path):
    slices = tmp_path / "slices.csv"
    save_point_cloud(sphere_slices(n_slices=3, per_slice=80, z_limit=0.5), slices)
    out = tmp_path / "labels.csv"
    result, summary = _run("interior", "--naive", "--in", str(slices), "--grid", "-1.2:1.2:13,-1.2:1.2:13",
                           "--truth", "--out", str(out))
    assert result.exit_code == 0
    assert summary["naive_counts"]["slice-scan"] == 3 * 13 * 13
    assert summary["error_rate"] < 0.05
    assert out.exists()


def test_model_interior(tmp_path, ring_fit):
    save_closed_fit(ring_fit, tmp_path / "ring")
    result, summary = _run("interior", "--model", str(tmp_path / "ring"), "--ref", "0.1,0.05",
                           "--grid", "-1.2:1.2:9", "--out", str(tmp_path / "labels.csv"))
    assert result.exit_code == 0
    assert sum(summary["counts"].values()) == 81

    result, _ = _run("interior", "--grid", "-1:1:3", "--out", str(tmp_path / "labels.csv"))
    assert result.exit_code == 2
    result, _ = _run("interior", "--model", str(tmp_path / "ring"), "--grid", "-1:1:3",
                     "--out", str(tmp_path / "labels.csv"))
    assert result.exit_code == 2


def test_check_config(tmp_path):
    result, summary = _run("check-config")
    assert result.exit_code == 0
    assert summary["cores"]["logical"] >= 1
    result, _ = _run("--config", str(tmp_path / "missing.env"), "check-config")
    assert result.exit_code == 2


def test_grid_spec():
    grid = parse_grid_spec("0:1:3", 2)
    assert grid.shape == (9, 2)
    grid = parse_grid_spec("0:1:2,5:6:3", 2)
    assert grid.shape == (6, 2)
    np.testing.assert_allclose(grid[:, 1], [5, 5.5, 6, 5, 5.5, 6])
    with pytest.raises(ConfigError):
        parse_grid_spec("0:1", 2)
    with pytest.raises(ConfigError):
        parse_grid_spec("0:1:2,0:1:2,0:1:2", 2)
    with pytest.raises(ConfigError):
        parse_grid_spec("1:0:3", 1)
