"""
This module contains the tests related to the solve command.
"""

import json
import os

import pandas as pd
import pytest
from typer.testing import CliRunner

from psdid.cli.main import cli_app
from psdid.solver import TRACE_COLUMNS
from tests import CONF_DIR

runner = CliRunner()


def solve(config_name: str, out: str, *options: str):
    config_path = os.path.join(CONF_DIR, "valids", config_name)
    return runner.invoke(cli_app, ["solve", "--config", config_path, "--out", out, *options])


def test_solve_exact(tmp_path):
    """
    Check that a converging solve writes the trace and the summary and exits
    with an exit code of 0.
    """
    result = solve("small_exact.json", str(tmp_path))
    assert result.exit_code == 0
    trace = pd.read_csv(os.path.join(tmp_path, "trace.csv"))
    assert list(trace.columns) == TRACE_COLUMNS
    assert set(trace["run"]) == {0, 1}
    with open(os.path.join(tmp_path, "summary.json")) as stream:
        summary = json.load(stream)
    assert summary["converged"]
    assert len(summary["eigenvalues"]) == 2
    assert summary["eigenvalues"][0] < summary["eigenvalues"][1]
    assert all(radius <= 1e-8 for radius in summary["certificate_radii"])
    assert not os.path.exists(os.path.join(tmp_path, "quality.csv"))


@pytest.mark.parametrize("config_name", ["matrix_market.json", "generalized.json", "yaml_format.yaml"])
def test_solve_other_sources(tmp_path, config_name):
    result = solve(config_name, str(tmp_path))
    assert result.exit_code == 0
    assert os.path.exists(os.path.join(tmp_path, "trace.csv"))


def test_solve_diagonal_eigenvalues(tmp_path):
    """
    Check that the three smallest eigenvalues of diag(1, ..., 10) are found.
    """
    result = solve("matrix_market.json", str(tmp_path))
    assert result.exit_code == 0
    with open(os.path.join(tmp_path, "summary.json")) as stream:
        eigenvalues = json.load(stream)["eigenvalues"]
    assert eigenvalues == pytest.approx([1.0, 2.0, 3.0], abs=1e-9)


def test_solve_records_quality(tmp_path):
    result = solve("small_inner_krylov.json", str(tmp_path))
    assert result.exit_code == 0
    quality = pd.read_csv(os.path.join(tmp_path, "quality.csv"))
    assert list(quality.columns) == ["run", "step", "epsilon"]
    assert len(quality) > 0


def test_solve_unconverged(tmp_path):
    """
    Check that a solve stopped by max_steps exits with an exit code of 2 and
    still writes its trace.
    """
    result = solve("unconverged.json", str(tmp_path))
    assert result.exit_code == 2
    assert os.path.exists(os.path.join(tmp_path, "trace.csv"))
    with open(os.path.join(tmp_path, "summary.json")) as stream:
        assert not json.load(stream)["converged"]


def test_solve_seed_is_deterministic(tmp_path):
    """
    Check that the same seed gives byte-identical traces and another seed
    another trace.
    """
    paths = [os.path.join(tmp_path, name) for name in ("first", "second", "third")]
    assert solve("small_exact.json", paths[0], "--seed", "3").exit_code == 0
    assert solve("small_exact.json", paths[1], "--seed", "3").exit_code == 0
    assert solve("small_exact.json", paths[2], "--seed", "4").exit_code == 0
    traces = []
    for path in paths:
        with open(os.path.join(path, "trace.csv"), "rb") as stream:
            traces.append(stream.read())
    assert traces[0] == traces[1]
    assert traces[0] != traces[2]


@pytest.mark.parametrize(
    "file_name",
    [
        "invalid_syntax.json",
        "wrong_schema_version.json",
        "unknown_field.json",
        "two_sources.json",
        "block_too_small.json",
        "missing_matrix.json",
        "no_such_config.json",
    ],
)
def test_solve_invalid_config(tmp_path, file_name):
    """
    Check that the command fails on an invalid configuration. The exit code
    must be 3.
    """
    config_path = os.path.join(CONF_DIR, "invalids", file_name)
    result = runner.invoke(cli_app, ["solve", "--config", config_path, "--out", str(tmp_path)])
    assert result.exit_code == 3
    assert not os.path.exists(os.path.join(tmp_path, "trace.csv"))
