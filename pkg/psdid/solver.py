"""
Preconditioned steepest descent iterations with implicit deflation: the single
vector step, the block step with Rayleigh-Ritz, a run until the stopping
criterion passes, and the multi-run driver accumulating a deflation set.
"""

from __future__ import annotations

import math
import time
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from pydantic_core import PydanticCustomError

from psdid.exceptions import ConfigError, DomainError
from psdid.linalg import (
    DROPTOL,
    DenseBlock,
    Pencil,
    rayleigh_quotient,
    rayleigh_ritz,
    s_inv_norms,
    s_norm,
    s_orthonormalize,
    spmv,
)
from psdid.logger import logger
from psdid.preconditioner import (
    KRYLOV_VARIANTS,
    InnerSolveReport,
    PreconditionedBlock,
    Preconditioner,
    PreconditionerSpec,
)
from psdid.shifts import ShiftStrategy, update_shift

TRACE_COLUMNS = [
    "run",
    "i",
    "step",
    "t",
    "theta",
    "resnorm",
    "sigma",
    "precond_variant",
    "inner_resid",
    "switched",
    "wall_ms",
]


class StopCriterion(str, Enum):
    S_INV_RESIDUAL = "s_inv_residual"
    RELATIVE_PSI = "relative_psi"


class BlockSizePolicy(str, Enum):
    FIXED_WINDOW = "fixed_window"
    SHRINKING_TAIL = "shrinking_tail"


class DeflationSet(BaseModel):
    """
    Accepted eigenpairs. U is S-orthonormal and has one column per accepted
    eigenvalue; i is the index of the next wanted eigenvalue.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    U: np.ndarray
    eigenvalues: List[float] = []
    residual_norms: List[float] = []

    @model_validator(mode="after")
    def one_column_per_eigenvalue(self) -> DeflationSet:
        if self.U.ndim != 2 or self.U.shape[1] != len(self.eigenvalues):
            raise PydanticCustomError(
                "deflation_columns", "U must have one column per accepted eigenvalue"
            )
        return self

    @property
    def i(self) -> int:
        return len(self.eigenvalues) + 1

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @staticmethod
    def empty(n: int) -> DeflationSet:
        return DeflationSet(U=np.zeros((n, 0)))

    def extend(self, vectors: DenseBlock, eigenvalues, residual_norms) -> DeflationSet:
        """
        New deflation set with the given pairs appended.
        """
        eigenvalues = [float(value) for value in eigenvalues]
        if self.eigenvalues and eigenvalues and eigenvalues[0] < self.eigenvalues[-1]:
            logger.warning(
                f"Accepted eigenvalue {eigenvalues[0]} is below the previously accepted "
                f"{self.eigenvalues[-1]}"
            )
        return DeflationSet(
            U=np.hstack([self.U, np.asarray(vectors).reshape(self.n, -1)]),
            eigenvalues=self.eigenvalues + eigenvalues,
            residual_norms=self.residual_norms + [float(norm) for norm in residual_norms],
        )


class BlockIterState(BaseModel):
    """
    Current block of S-orthonormal Ritz vectors Z, its ascending Ritz values,
    the residual block R = HZ - SZ diag(theta), the residual S^-1 norms and the
    relative residuals psi of every column.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    Z: np.ndarray
    theta: np.ndarray
    R: np.ndarray
    resnorms: np.ndarray
    psi: np.ndarray
    step: int = 0
    inner_residuals: List[float] = []
    inner_warning: bool = False

    @property
    def k_tilde(self) -> int:
        return self.Z.shape[1]


class RunConfig(BaseModel):
    """
    Settings of one run: k wanted pairs out of a block of block_size columns.
    A converged pair enters the deflation set when its certificate radius
    ||r||_S^-1 / ||z||_S is at most accept_tol. With the s_inv_residual
    criterion accept_tol defaults to tolerance. The relative_psi criterion
    measures a scale free residual, so without an explicit accept_tol its
    converged pairs are accepted with no absolute certificate check.
    """

    k: int = Field(default=1, ge=1)
    block_size: int = Field(default=1, ge=1)
    shift: ShiftStrategy = Field(default_factory=ShiftStrategy)
    preconditioner: PreconditionerSpec = Field(default_factory=PreconditionerSpec)
    stop_criterion: StopCriterion = StopCriterion.S_INV_RESIDUAL
    tolerance: float = Field(default=1e-8, gt=0.0)
    accept_tol: Optional[float] = Field(default=None, gt=0.0)
    max_steps: int = Field(default=1000, ge=0)
    block_policy: BlockSizePolicy = BlockSizePolicy.FIXED_WINDOW
    seed: int = 0
    droptol: float = DROPTOL
    record_wall_time: bool = False

    @model_validator(mode="after")
    def block_holds_wanted_pairs(self) -> RunConfig:
        if self.k > self.block_size:
            raise PydanticCustomError(
                "block_too_small",
                "Block size {block_size} must be at least k = {k}",
                {"block_size": self.block_size, "k": self.k},
            )
        return self


class TraceRecord(BaseModel):
    """
    One outer step of a run. sigma is the shift the step was computed with and
    switched marks a dynamic shift change right after the step.
    """

    run: int
    i: int
    step: int
    thetas: List[float]
    resnorms: List[float]
    sigma: float
    precond_variant: str
    inner_residuals: List[float] = []
    inner_warning: bool = False
    switched: bool = False
    wall_ms: float = 0.0
    epsilon: Optional[float] = None


class Trace(BaseModel):
    records: List[TraceRecord] = []
    fingerprint: Optional[str] = None

    def runs(self) -> Dict[int, List[TraceRecord]]:
        """
        Records grouped by run, sorted by step.
        """
        grouped: Dict[int, List[TraceRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.run, []).append(record)
        return {
            run: sorted(records, key=lambda record: record.step)
            for run, records in sorted(grouped.items())
        }

    def to_frame(self) -> pd.DataFrame:
        """
        One row per outer step and per column t (1-based).
        :return: trace table with the TRACE_COLUMNS columns.
        """
        rows = []
        for record in self.records:
            for t, theta in enumerate(record.thetas, start=1):
                rows.append(
                    {
                        "run": record.run,
                        "i": record.i,
                        "step": record.step,
                        "t": t,
                        "theta": theta,
                        "resnorm": record.resnorms[t - 1],
                        "sigma": record.sigma,
                        "precond_variant": record.precond_variant,
                        "inner_resid": (
                            record.inner_residuals[t - 1]
                            if t - 1 < len(record.inner_residuals)
                            else math.nan
                        ),
                        "switched": record.switched,
                        "wall_ms": record.wall_ms,
                    }
                )
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    @staticmethod
    def from_frame(table: pd.DataFrame, fingerprint: Optional[str] = None) -> Trace:
        """
        Rebuild a trace from its table.
        :param table: trace table, as written by to_frame.
        :param fingerprint: fingerprint of the traced pencil, if known.
        :return: trace.
        """
        missing = [column for column in TRACE_COLUMNS if column not in table.columns]
        if missing:
            raise ConfigError("trace table", f"missing columns {missing}")
        records = []
        for (run, step), group in table.groupby(["run", "step"], sort=True):
            group = group.sort_values("t")
            inner = [float(value) for value in group["inner_resid"] if not pd.isna(value)]
            records.append(
                TraceRecord(
                    run=int(run),
                    i=int(group["i"].iloc[0]),
                    step=int(step),
                    thetas=[float(value) for value in group["theta"]],
                    resnorms=[float(value) for value in group["resnorm"]],
                    sigma=float(group["sigma"].iloc[0]),
                    precond_variant=str(group["precond_variant"].iloc[0]),
                    inner_residuals=inner,
                    switched=bool(group["switched"].iloc[0]),
                    wall_ms=float(group["wall_ms"].iloc[0]),
                )
            )
        return Trace(records=records, fingerprint=fingerprint)


class RunResult(BaseModel):
    """
    First k Ritz pairs of a run, with their residual S^-1 norms and certificate
    radii ||r||_{S^-1} / ||z||_S, and the final block for reseeding.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    run: int
    i: int
    eigenvalues: np.ndarray
    vectors: np.ndarray
    residual_norms: np.ndarray
    certificate_radii: np.ndarray
    steps: int
    converged: bool
    sigma: float
    final_state: BlockIterState

    @property
    def trailing_vectors(self) -> np.ndarray:
        return self.final_state.Z[:, len(self.eigenvalues) :]


class MultiRunResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    deflation: DeflationSet
    trace: Trace
    runs: List[RunResult]
    converged: bool


# Called after the preconditioning of every outer step with the deflation set,
# the preconditioner, the state before the step, the residual block that was
# preconditioned and the preconditioned block. The returned value is stored as
# the step quality in the trace record.
StepHook = Callable[
    [DeflationSet, Preconditioner, BlockIterState, np.ndarray, np.ndarray], Optional[float]
]


def residual_block(p: Pencil, Z: DenseBlock, theta) -> np.ndarray:
    return spmv(p.H, Z) - spmv(p.S, Z) * np.asarray(theta)[None, :]


def make_state(
    p: Pencil,
    Z: DenseBlock,
    theta,
    step: int,
    inner_report: Optional[InnerSolveReport] = None,
) -> BlockIterState:
    """
    State of a block of Ritz vectors, with residuals and their norms.
    """
    theta = np.asarray(theta, dtype=np.float64)
    HZ = spmv(p.H, Z)
    SZ = spmv(p.S, Z)
    R = HZ - SZ * theta[None, :]
    resnorms = s_inv_norms(p.S, R)
    r_norms = np.linalg.norm(R, axis=0)
    denominators = np.linalg.norm(HZ, axis=0) + np.abs(theta) * np.linalg.norm(SZ, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        psi = np.where(
            denominators > 0.0, r_norms / denominators, np.where(r_norms > 0.0, np.inf, 0.0)
        )
    report = inner_report or InnerSolveReport()
    return BlockIterState(
        Z=Z,
        theta=theta,
        R=R,
        resnorms=resnorms,
        psi=psi,
        step=step,
        inner_residuals=list(report.relative_residuals),
        inner_warning=report.warning,
    )


def _deflation_basis(defl: DeflationSet) -> Optional[np.ndarray]:
    return defl.U if defl.U.shape[1] > 0 else None


def initial_state(
    p: Pencil, defl: DeflationSet, Z0: DenseBlock, droptol: float = DROPTOL
) -> BlockIterState:
    """
    S-orthogonalise the initial block against U and replace it by the Ritz
    vectors of its span.
    """
    Z0 = np.asarray(Z0, dtype=np.float64).reshape(p.n, -1)
    ritz = rayleigh_ritz(p, Z0, range(Z0.shape[1]), _deflation_basis(defl), droptol)
    return make_state(p, ritz.vectors, ritz.values, 0)


def _precondition(
    state: BlockIterState, defl: DeflationSet, K: Preconditioner, p: Pencil
) -> Tuple[np.ndarray, PreconditionedBlock]:
    R = state.R
    U = _deflation_basis(defl)
    if U is not None:
        R = R - spmv(p.S, U) @ (U.T @ R)
    return R, K.solve(R, deflation_basis=U, block=state.Z)


def _ritz_update(
    state: BlockIterState,
    defl: DeflationSet,
    preconditioned: PreconditionedBlock,
    p: Pencil,
    droptol: float,
) -> BlockIterState:
    basis = np.hstack([state.Z, preconditioned.block])
    ritz = rayleigh_ritz(p, basis, range(state.k_tilde), _deflation_basis(defl), droptol)
    return make_state(p, ritz.vectors, ritz.values, state.step + 1, preconditioned.report)


def bpsd_id_step(
    state: BlockIterState,
    defl: DeflationSet,
    K: Preconditioner,
    p: Pencil,
    droptol: float = DROPTOL,
) -> BlockIterState:
    """
    One block step: P = K R, then the k~ smallest Ritz pairs of span{Z, P}
    S-orthogonal to U, i.e. the Ritz pairs ranked i to i - 1 + k~ in
    span{U, Z, P}.
    :param state: current state.
    :param defl: deflation set.
    :param K: preconditioner.
    :param p: pencil.
    :param droptol: rank reveal threshold of the trial basis.
    :return: next state.
    """
    if not np.any(state.R):
        return state.model_copy(update={"step": state.step + 1})
    _, preconditioned = _precondition(state, defl, K, p)
    return _ritz_update(state, defl, preconditioned, p, droptol)


def psd_id_step(z, defl: DeflationSet, K: Preconditioner, p: Pencil) -> np.ndarray:
    """
    One single vector step: the S-normalised Ritz vector of the smallest Ritz
    value of span{z, K r} S-orthogonal to U.
    """
    z = s_orthonormalize(p.S, np.asarray(z, dtype=np.float64), _deflation_basis(defl))[:, 0]
    state = make_state(p, z[:, None], [rayleigh_quotient(p, z)], 0)
    return bpsd_id_step(state, defl, K, p).Z[:, 0]


def stop_check(state: BlockIterState, cfg: RunConfig) -> bool:
    """
    Stopping test on the first k columns: root sum square of the S^-1 residual
    norms, or largest relative residual psi.
    """
    k = min(cfg.k, state.k_tilde)
    if cfg.stop_criterion == StopCriterion.RELATIVE_PSI:
        return bool(np.max(state.psi[:k]) <= cfg.tolerance)
    return bool(math.sqrt(float(np.sum(state.resnorms[:k] ** 2))) <= cfg.tolerance)


def _trace_record(
    run_index: int,
    defl: DeflationSet,
    state: BlockIterState,
    sigma: float,
    label: str,
    switched: bool,
    wall_ms: float,
    epsilon: Optional[float] = None,
) -> TraceRecord:
    return TraceRecord(
        run=run_index,
        i=defl.i,
        step=state.step,
        thetas=[float(value) for value in state.theta],
        resnorms=[float(value) for value in state.resnorms],
        sigma=sigma,
        precond_variant=label,
        inner_residuals=state.inner_residuals,
        inner_warning=state.inner_warning,
        switched=switched,
        wall_ms=wall_ms,
        epsilon=epsilon,
    )


def _accepted(result: RunResult, cfg: RunConfig) -> bool:
    # relative_psi without accept_tol: no absolute certificate check
    if not result.converged:
        return False
    accept_tol = cfg.accept_tol
    if accept_tol is None and cfg.stop_criterion == StopCriterion.S_INV_RESIDUAL:
        accept_tol = cfg.tolerance
    return accept_tol is None or bool(np.all(result.certificate_radii <= accept_tol))


def run(
    p: Pencil,
    defl: DeflationSet,
    Z0: DenseBlock,
    cfg: RunConfig,
    run_index: int = 0,
    step_hook: Optional[StepHook] = None,
) -> Tuple[RunResult, List[TraceRecord]]:
    """
    Iterate block steps from Z0 until the stopping criterion passes on the
    first k columns or max_steps steps were done. The shift strategy is applied
    between steps and the preconditioner is rebuilt when the shift changes.
    :param p: pencil.
    :param defl: deflation set, fixed during the run.
    :param Z0: initial block of block_size columns.
    :param cfg: run settings.
    :param run_index: index of the run, recorded in the trace.
    :param step_hook: optional callback, see StepHook.
    :return: the first k Ritz pairs and the trace of the run.
    """
    start = time.perf_counter()

    def elapsed_ms() -> float:
        return 1000.0 * (time.perf_counter() - start) if cfg.record_wall_time else 0.0

    sigma = cfg.shift.initial_shift(defl)
    spec = cfg.preconditioner.with_shift(sigma)
    K = Preconditioner.build(spec, p)
    logger.info(
        f"Run {run_index} starts at i = {defl.i} with k = {cfg.k}, block size "
        f"{np.asarray(Z0).reshape(p.n, -1).shape[1]}, sigma = {sigma}"
    )

    state = initial_state(p, defl, Z0, cfg.droptol)
    records = [_trace_record(run_index, defl, state, sigma, K.label, False, elapsed_ms())]
    converged = stop_check(state, cfg)
    while not converged and state.step < cfg.max_steps:
        if not np.any(state.R):
            break
        driving_residual, preconditioned = _precondition(state, defl, K, p)
        new_state = _ritz_update(state, defl, preconditioned, p, cfg.droptol)
        epsilon = (
            step_hook(defl, K, state, driving_residual, preconditioned.block)
            if step_hook is not None
            else None
        )
        update = update_shift(
            cfg.shift, sigma, new_state, state.theta, defl, min(cfg.k, new_state.k_tilde)
        )
        records.append(
            _trace_record(
                run_index, defl, new_state, sigma, K.label, update.switched, elapsed_ms(), epsilon
            )
        )
        logger.debug(
            f"Run {run_index} step {new_state.step}: theta = {new_state.theta.tolist()}, "
            f"residuals = {new_state.resnorms.tolist()}"
        )
        if update.sigma != sigma:
            sigma = update.sigma
            tolerance = update.inner_tolerance if spec.variant in KRYLOV_VARIANTS else None
            spec = spec.with_shift(sigma, tolerance)
            K = Preconditioner.build(spec, p)
        state = new_state
        converged = stop_check(state, cfg)

    k = min(cfg.k, state.k_tilde)
    vectors = state.Z[:, :k]
    s_norms = np.array([s_norm(p.S, vectors[:, j]) for j in range(k)])
    result = RunResult(
        run=run_index,
        i=defl.i,
        eigenvalues=state.theta[:k].copy(),
        vectors=vectors.copy(),
        residual_norms=state.resnorms[:k].copy(),
        certificate_radii=state.resnorms[:k] / s_norms,
        steps=state.step,
        converged=converged,
        sigma=sigma,
        final_state=state,
    )
    if converged:
        logger.info(f"Run {run_index} converged in {state.step} steps: {result.eigenvalues.tolist()}")
    else:
        logger.warning(f"Run {run_index} did not converge in {cfg.max_steps} steps")
    return result, records


def _random_block(rng: np.random.Generator, n: int, columns: int) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=(n, columns))


def multi_run(
    p: Pencil,
    m: int,
    cfg: RunConfig,
    step_hook: Optional[StepHook] = None,
) -> MultiRunResult:
    """
    Compute the m smallest eigenpairs by successive runs, each accepting k pairs
    into the deflation set. With the fixed_window policy every run uses
    block_size columns: the trailing Ritz vectors of the previous run completed
    by fresh random columns. With the shrinking_tail policy the first run uses m
    random columns and each next run the m - i + 1 trailing Ritz vectors.
    :param p: pencil.
    :param m: number of wanted eigenpairs, below n.
    :param cfg: settings shared by the runs.
    :param step_hook: optional callback, see StepHook.
    :return: deflation set, trace of every run and run results.
    """
    n = p.n
    if not 1 <= m < n:
        raise DomainError(f"Number of targets must lie in [1, {n - 1}], got {m}")
    rng = np.random.default_rng(cfg.seed)
    shrinking = cfg.block_policy == BlockSizePolicy.SHRINKING_TAIL
    pool = _random_block(rng, n, m if shrinking else m + cfg.block_size)
    used = 0

    defl = DeflationSet.empty(n)
    trailing = np.zeros((n, 0))
    runs: List[RunResult] = []
    records: List[TraceRecord] = []
    converged = True
    while len(defl.eigenvalues) < m:
        accepted = len(defl.eigenvalues)
        if shrinking:
            width = m - accepted
        else:
            width = min(cfg.block_size, n - accepted)
        k = min(cfg.k, m - accepted, width)

        if shrinking and runs:
            Z0 = trailing
        else:
            reused = trailing[:, : min(trailing.shape[1], width)]
            fresh = width - reused.shape[1]
            Z0 = np.hstack([reused, pool[:, used : used + fresh]])
            used += fresh

        run_cfg = cfg.model_copy(update={"k": k, "block_size": width})
        result, run_records = run(p, defl, Z0, run_cfg, len(runs), step_hook)
        runs.append(result)
        records.extend(run_records)
        if not _accepted(result, run_cfg):
            converged = False
            logger.warning(f"Multi-run stops after run {result.run}: pairs not accepted")
            break
        defl = defl.extend(result.vectors, result.eigenvalues, result.residual_norms)
        for value, radius in zip(result.eigenvalues, result.certificate_radii):
            logger.info(f"Accepted eigenvalue {value} (certificate radius {radius:.3e})")
        trailing = result.trailing_vectors

    trace = Trace(records=records, fingerprint=p.fingerprint())
    return MultiRunResult(deflation=defl, trace=trace, runs=runs, converged=converged)
