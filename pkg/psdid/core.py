import json
import os
import tempfile
import time
from contextlib import contextmanager
from functools import wraps
from typing import Dict, Iterator, Optional

import pandas as pd

from psdid.config import ExperimentConfig
from psdid.exceptions import ConfigError
from psdid.linalg import Pencil
from psdid.logger import logger
from psdid.oracle import QualityRecorder, assess_trace_quality, dense_oracle
from psdid.preconditioner import KRYLOV_VARIANTS, band_width
from psdid.problems import mm_write
from psdid.solver import MultiRunResult, Trace, multi_run
from psdid.verification import BoundReport, verify_trace

TRACE_FILE = "trace.csv"
QUALITY_FILE = "quality.csv"
SUMMARY_FILE = "summary.json"
BOUND_REPORT_FILE = "bound_report.json"
BOUNDS_FILE = "bounds.csv"
ORACLE_FILE = "oracle.json"
METADATA_FILE = "metadata.json"


def execution_time_logging(func):
    """
    Decorator to log execution time as an info.
    :param func: function to wrap.
    :return: wrapped function.
    """

    @wraps(func)
    def execution_time_logging_wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        end_time = time.perf_counter()
        total_time = end_time - start_time
        logger.info(f"Function {func.__name__} executed in {total_time:.4f} seconds")
        return result

    return execution_time_logging_wrapper


@contextmanager
def atomic_output(path: str) -> Iterator[str]:
    """
    Yield a temporary path next to path, moved onto path once the block
    succeeds.
    :param path: final path of the file.
    :return: temporary path to write.
    """
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    handle, temporary = tempfile.mkstemp(
        dir=directory, prefix=".tmp-", suffix=os.path.splitext(path)[1]
    )
    os.close(handle)
    try:
        yield temporary
        os.replace(temporary, path)
    except BaseException:
        if os.path.exists(temporary):
            os.remove(temporary)
        raise


def write_json(path: str, payload: Dict):
    with atomic_output(path) as temporary:
        with open(temporary, "w") as stream:
            json.dump(payload, stream, indent=2)
    logger.info(f"Saved {path}")


def write_table(path: str, table: pd.DataFrame):
    with atomic_output(path) as temporary:
        table.to_csv(temporary, index=False)
    logger.info(f"Saved {path}")


def output_dir(cfg: ExperimentConfig, out: Optional[str]) -> str:
    directory = out or cfg.output_dir
    if directory is None:
        raise ConfigError("--out", "no output directory given on the command line or in the config")
    return directory if out is not None else cfg.resolve(directory)


@execution_time_logging
def generate(cfg: ExperimentConfig, out_dir: str) -> Dict:
    """
    Generate the test problem of the configuration and write it as Matrix Market
    files with a metadata file.
    :param cfg: experiment configuration with a generator problem.
    :param out_dir: output directory.
    :return: metadata.
    """
    spec = cfg.problem.generator
    if spec is None:
        raise ConfigError("problem", "generate needs a generator problem")
    pencil, grid = cfg.load_pencil()
    with atomic_output(os.path.join(out_dir, "H.mtx")) as temporary:
        mm_write(pencil.H, temporary)
    if not pencil.S.is_identity:
        with atomic_output(os.path.join(out_dir, "S.mtx")) as temporary:
            mm_write(pencil.S, temporary)
    metadata = {
        "n": pencil.n,
        "nnz": pencil.H.nnz,
        "bandwidth": band_width(pencil.H),
        "width": spec.width,
        "height": spec.height,
        "h": spec.h,
        "slits": [slit.model_dump() for slit in spec.slits],
        "removed_nodes": grid.removed_count,
        "node_map_hash": grid.fingerprint(),
        "fingerprint": pencil.fingerprint(),
    }
    write_json(os.path.join(out_dir, METADATA_FILE), metadata)
    return metadata


def _summary(pencil: Pencil, cfg: ExperimentConfig, result: MultiRunResult) -> Dict:
    deflation = result.deflation
    return {
        "fingerprint": pencil.fingerprint(),
        "n": pencil.n,
        "targets": cfg.targets,
        "seed": cfg.seed,
        "converged": result.converged,
        "eigenvalues": list(deflation.eigenvalues),
        "residual_norms": list(deflation.residual_norms),
        "certificate_radii": [
            float(radius) for run in result.runs if run.converged for radius in run.certificate_radii
        ],
        "runs": [
            {
                "run": run.run,
                "i": run.i,
                "steps": run.steps,
                "converged": run.converged,
                "sigma": run.sigma,
                "eigenvalues": [float(value) for value in run.eigenvalues],
            }
            for run in result.runs
        ],
    }


@execution_time_logging
def solve(cfg: ExperimentConfig, out_dir: str) -> MultiRunResult:
    """
    Compute the configured number of smallest eigenpairs and write the trace and
    the summary.
    :param cfg: experiment configuration.
    :param out_dir: output directory.
    :return: multi-run result.
    """
    pencil, _ = cfg.load_pencil()
    recorder = None
    if cfg.record_quality:
        if pencil.n <= cfg.dense_limit:
            recorder = QualityRecorder(dense_oracle(pencil, cfg.dense_limit), pencil)
        else:
            logger.warning(
                f"Step quality not recorded: n = {pencil.n} above the dense limit {cfg.dense_limit}"
            )
    result = multi_run(pencil, cfg.targets, cfg.run_config(), recorder)

    write_table(os.path.join(out_dir, TRACE_FILE), result.trace.to_frame())
    if recorder is not None:
        quality = pd.DataFrame(
            [
                {"run": record.run, "step": record.step, "epsilon": record.epsilon}
                for record in result.trace.records
                if record.epsilon is not None
            ],
            columns=["run", "step", "epsilon"],
        )
        write_table(os.path.join(out_dir, QUALITY_FILE), quality)
    write_json(os.path.join(out_dir, SUMMARY_FILE), _summary(pencil, cfg, result))
    return result


def load_trace(trace_path: str, pencil: Pencil) -> Trace:
    """
    Read a trace table, with the step qualities and the fingerprint stored next
    to it when present.
    :param trace_path: path of trace.csv.
    :param pencil: pencil the trace is analysed against.
    :return: trace.
    """
    if not os.path.exists(trace_path):
        raise ConfigError(trace_path, "no such file")
    directory = os.path.dirname(os.path.abspath(trace_path))
    fingerprint = pencil.fingerprint()
    summary_path = os.path.join(directory, SUMMARY_FILE)
    if os.path.exists(summary_path):
        with open(summary_path, "r") as stream:
            fingerprint = json.load(stream).get("fingerprint", fingerprint)
    trace = Trace.from_frame(pd.read_csv(trace_path), fingerprint=fingerprint)

    quality_path = os.path.join(directory, QUALITY_FILE)
    if os.path.exists(quality_path):
        quality = pd.read_csv(quality_path)
        epsilons = {
            (int(row.run), int(row.step)): float(row.epsilon) for row in quality.itertuples()
        }
        for record in trace.records:
            record.epsilon = epsilons.get((record.run, record.step))
    return trace


@execution_time_logging
def analyze(cfg: ExperimentConfig, trace_path: str, out_dir: str) -> Optional[BoundReport]:
    """
    Check a trace against the convergence bounds and write the bound report and
    the per step bound table. Above the dense limit only the residual
    certificates are reported.
    :param cfg: experiment configuration the trace was produced with.
    :param trace_path: path of trace.csv.
    :param out_dir: output directory.
    :return: bound report, None above the dense limit.
    """
    pencil, _ = cfg.load_pencil()
    trace = load_trace(trace_path, pencil)
    if pencil.n > cfg.dense_limit:
        last_steps = {}
        for record in trace.records:
            last_steps[record.run] = record
        write_json(
            os.path.join(out_dir, BOUND_REPORT_FILE),
            {
                "fingerprint": trace.fingerprint,
                "bounds_available": False,
                "reason": f"n = {pencil.n} above the dense limit {cfg.dense_limit}",
                "certificates": {
                    str(run): {"thetas": record.thetas, "resnorms": record.resnorms}
                    for run, record in last_steps.items()
                },
            },
        )
        return None

    oracle = dense_oracle(pencil, cfg.dense_limit)
    oracle.check_fingerprint(trace.fingerprint)
    quality = None
    if cfg.preconditioner.variant not in KRYLOV_VARIANTS:
        quality = assess_trace_quality(trace, oracle, pencil, cfg.preconditioner)
    report = verify_trace(trace, oracle, quality)

    payload = {"bounds_available": True} | report.summary()
    payload["multi_step"] = {
        run: [curves.model_dump() for curves in bounds] for run, bounds in report.multi_step.items()
    }
    write_json(os.path.join(out_dir, BOUND_REPORT_FILE), payload)
    write_table(os.path.join(out_dir, BOUNDS_FILE), report.to_frame())
    return report


@execution_time_logging
def oracle(cfg: ExperimentConfig, out_dir: str, count: Optional[int] = None) -> Dict:
    """
    Dense eigenvalues of the configured pencil.
    :param cfg: experiment configuration.
    :param out_dir: output directory.
    :param count: number of smallest eigenvalues to save, all when None.
    :return: saved content.
    """
    pencil, _ = cfg.load_pencil()
    spectral_oracle = dense_oracle(pencil, cfg.dense_limit)
    values = spectral_oracle.eigenvalues if count is None else spectral_oracle.eigenvalues[:count]
    payload = {
        "fingerprint": spectral_oracle.fingerprint,
        "n": spectral_oracle.n,
        "eigenvalues": [float(value) for value in values],
    }
    write_json(os.path.join(out_dir, ORACLE_FILE), payload)
    return payload
