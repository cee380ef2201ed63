import os

import pytest

from psdid.config import ExperimentConfig
from psdid.exceptions import ConfigError, MatrixMarketError
from psdid.preconditioner import PreconditionerVariant
from psdid.shifts import ShiftVariant
from psdid.solver import BlockSizePolicy, StopCriterion
from tests import CONF_DIR


def valid(file_name: str) -> str:
    return os.path.join(CONF_DIR, "valids", file_name)


def invalid(file_name: str) -> str:
    return os.path.join(CONF_DIR, "invalids", file_name)


def test_load_generator_config():
    """
    Check that an experiment file is loaded with its settings and the defaults
    of the fields it omits.
    """
    cfg = ExperimentConfig.from_file(valid("small_exact.json"))
    assert cfg.targets == 2
    assert cfg.shift.variant == ShiftVariant.FIXED
    assert cfg.preconditioner.variant == PreconditionerVariant.EXACT_SHIFT_INVERT
    assert cfg.stop.criterion == StopCriterion.S_INV_RESIDUAL
    assert cfg.stop.tolerance == 1e-8
    assert cfg.base_dir == os.path.abspath(os.path.join(CONF_DIR, "valids"))
    run_cfg = cfg.run_config()
    assert run_cfg.k == 1 and run_cfg.block_size == 2
    assert run_cfg.max_steps == 200
    pencil, grid = cfg.load_pencil()
    assert pencil.n == 343
    assert grid.removed_count == 2


def test_load_matrix_market_config():
    """
    Check that Matrix Market paths are resolved against the directory of the
    experiment file.
    """
    cfg = ExperimentConfig.from_file(valid("matrix_market.json"))
    assert cfg.policy.block_policy == BlockSizePolicy.SHRINKING_TAIL
    pencil, grid = cfg.load_pencil()
    assert grid is None
    assert pencil.n == 10
    assert pencil.S.is_identity

    generalized, _ = ExperimentConfig.from_file(valid("generalized.json")).load_pencil()
    assert not generalized.S.is_identity
    assert generalized.S.nnz == 16


def test_load_yaml_config():
    cfg = ExperimentConfig.from_file(valid("yaml_format.yaml"))
    assert cfg.stop.tolerance == 1e-10
    assert cfg.load_pencil()[0].n == 9


def test_overrides():
    cfg = ExperimentConfig.from_file(valid("small_exact.json"))
    overridden = cfg.with_overrides(seed=11, dense_limit=50)
    assert overridden.seed == 11
    assert overridden.dense_limit == 50
    assert overridden.run_config().seed == 11
    assert cfg.seed == 0
    assert cfg.with_overrides() == cfg


@pytest.mark.parametrize(
    "file_name",
    [
        "invalid_syntax.json",
        "wrong_schema_version.json",
        "unknown_field.json",
        "misspelled_shift_field.json",
        "misspelled_preconditioner_field.json",
        "two_sources.json",
        "block_too_small.json",
        "off_grid.json",
        "not_a_mapping.json",
        "no_such_config.json",
    ],
)
def test_invalid_configs(file_name):
    """
    Check that invalid experiment files raise a ConfigError with the
    configuration error exit code.
    """
    with pytest.raises(ConfigError) as error:
        ExperimentConfig.from_file(invalid(file_name))
    assert error.value.exit_code == 3


def test_missing_matrix():
    cfg = ExperimentConfig.from_file(invalid("missing_matrix.json"))
    with pytest.raises(MatrixMarketError):
        cfg.load_pencil()
