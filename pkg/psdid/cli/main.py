import sys
from typing import Optional

import typer

import psdid.core
from psdid.config import ExperimentConfig
from psdid.exceptions import (
    EXIT_NUMERICAL_FAILURE,
    EXIT_UNCONVERGED,
    EXIT_VERIFICATION_FAILED,
    PsdidError,
)
from psdid.logger import init_logger, logger
from psdid.suites import run_suite

cli_app = typer.Typer()

CONFIG_HELP = "Experiment configuration file (JSON, schema_version 1)."
OUT_HELP = "Output directory, overrides output_dir of the configuration."
SEED_HELP = "Seed of the random initial blocks, overrides the configuration."
DENSE_LIMIT_HELP = "Largest order solved densely by the oracle and the analysis."


def load_config(
    config_path: str, seed: Optional[int] = None, dense_limit: Optional[int] = None
) -> ExperimentConfig:
    logger.info("Loading configuration")
    cfg = ExperimentConfig.from_file(config_path).with_overrides(seed, dense_limit)
    logger.info("Configuration loaded with no error")
    return cfg


def fail(command: str, error: Exception):
    """
    Log an error raised by a command and exit with its code.
    """
    if isinstance(error, PsdidError):
        logger.error(f"Command {command} failed: {error}")
        sys.exit(error.exit_code)
    logger.exception(f"Command {command} failed with an unexpected error: {error}")
    sys.exit(EXIT_NUMERICAL_FAILURE)


@cli_app.command()
def generate(
    config: str = typer.Option(..., "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
):
    """
    Write the configured slit rectangle problem as Matrix Market files.
    """
    try:
        logger.info("Command generate begin")
        cfg = load_config(config)
        metadata = psdid.core.generate(cfg, psdid.core.output_dir(cfg, out))
        typer.echo(f"n = {metadata['n']}, nnz = {metadata['nnz']}")
        logger.info("Command generate finished with no error")
    except Exception as e:
        fail("generate", e)


@cli_app.command()
def solve(
    config: str = typer.Option(..., "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help=SEED_HELP),
    dense_limit: Optional[int] = typer.Option(
        None, "--dense-limit", min=1, help=DENSE_LIMIT_HELP
    ),
):
    """
    Compute the smallest eigenpairs and write trace.csv and summary.json.
    """
    try:
        logger.info("Command solve begin")
        cfg = load_config(config, seed, dense_limit)
        result = psdid.core.solve(cfg, psdid.core.output_dir(cfg, out))
        for value in result.deflation.eigenvalues:
            typer.echo(f"{value:.12g}")
        if not result.converged:
            logger.warning("Command solve finished before every eigenpair converged")
            sys.exit(EXIT_UNCONVERGED)
        logger.info("Command solve finished with no error")
    except Exception as e:
        fail("solve", e)


@cli_app.command()
def analyze(
    trace: str = typer.Argument(..., help="trace.csv written by the solve command."),
    config: str = typer.Option(..., "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
    dense_limit: Optional[int] = typer.Option(
        None, "--dense-limit", min=1, help=DENSE_LIMIT_HELP
    ),
):
    """
    Check a trace against the convergence bounds and write bound_report.json.
    """
    try:
        logger.info("Command analyze begin")
        cfg = load_config(config, dense_limit=dense_limit)
        report = psdid.core.analyze(cfg, trace, psdid.core.output_dir(cfg, out))
        if report is None:
            typer.echo("Pencil above the dense limit: residual certificates only")
        else:
            summary = report.summary()
            typer.echo(
                f"checked {summary['checked_steps']} steps, {summary['violations']} violations, "
                f"{summary['monotonicity_violations']} monotonicity violations, "
                f"{len(summary['multi_step_violations'])} multi-step violations"
            )
            if not report.passed:
                sys.exit(EXIT_VERIFICATION_FAILED)
        logger.info("Command analyze finished with no error")
    except Exception as e:
        fail("analyze", e)


@cli_app.command()
def verify(suite: str = typer.Argument(..., help="Name of the acceptance suite.")):
    """
    Run an acceptance suite and print measured against expected values.
    """
    try:
        logger.info("Command verify begin")
        report = run_suite(suite)
        typer.echo(report.to_text())
        if not report.passed:
            sys.exit(EXIT_VERIFICATION_FAILED)
        logger.info("Command verify finished with no error")
    except Exception as e:
        fail("verify", e)


@cli_app.command()
def oracle(
    config: str = typer.Option(..., "--config", help=CONFIG_HELP),
    out: Optional[str] = typer.Option(None, "--out", help=OUT_HELP),
    count: Optional[int] = typer.Option(
        None, "--count", min=1, help="Number of smallest eigenvalues to save."
    ),
    dense_limit: Optional[int] = typer.Option(
        None, "--dense-limit", min=1, help=DENSE_LIMIT_HELP
    ),
):
    """
    Solve the configured pencil densely and write oracle.json.
    """
    try:
        logger.info("Command oracle begin")
        cfg = load_config(config, dense_limit=dense_limit)
        payload = psdid.core.oracle(cfg, psdid.core.output_dir(cfg, out), count)
        for value in payload["eigenvalues"]:
            typer.echo(f"{value:.12g}")
        logger.info("Command oracle finished with no error")
    except Exception as e:
        fail("oracle", e)


if __name__ == "__main__":
    init_logger()
    cli_app(standalone_mode=False)
