"""
This module contains the tests related to the generate command.
"""

import json
import os

from typer.testing import CliRunner

from psdid.cli.main import cli_app
from psdid.problems import mm_read
from tests import CONF_DIR

runner = CliRunner()


def test_generate_slit_problem(tmp_path):
    """
    Check that the command writes H.mtx and metadata.json for a generated
    problem and exits with an exit code of 0.
    """
    config_path = os.path.join(CONF_DIR, "valids", "small_exact.json")
    result = runner.invoke(cli_app, ["generate", "--config", config_path, "--out", str(tmp_path)])
    assert result.exit_code == 0
    assert "n = 343" in result.output
    with open(os.path.join(tmp_path, "metadata.json")) as stream:
        metadata = json.load(stream)
    assert metadata["n"] == 343
    assert metadata["removed_nodes"] == 2
    H = mm_read(os.path.join(tmp_path, "H.mtx"))
    assert H.symmetric
    assert H.nnz == metadata["nnz"]
    assert not os.path.exists(os.path.join(tmp_path, "S.mtx"))


def test_generate_needs_generator(tmp_path):
    """
    Check that the command fails on a Matrix Market problem. The exit code must
    be 3.
    """
    config_path = os.path.join(CONF_DIR, "valids", "matrix_market.json")
    result = runner.invoke(cli_app, ["generate", "--config", config_path, "--out", str(tmp_path)])
    assert result.exit_code == 3


def test_generate_without_output_dir():
    """
    Check that the command fails when neither --out nor output_dir is given.
    The exit code must be 3.
    """
    config_path = os.path.join(CONF_DIR, "valids", "small_exact.json")
    result = runner.invoke(cli_app, ["generate", "--config", config_path])
    assert result.exit_code == 3


def test_generate_invalid_config(tmp_path):
    config_path = os.path.join(CONF_DIR, "invalids", "off_grid.json")
    result = runner.invoke(cli_app, ["generate", "--config", config_path, "--out", str(tmp_path)])
    assert result.exit_code == 3
