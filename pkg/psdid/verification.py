"""
Check solver traces against the single step and multi-step convergence bounds.
"""

from __future__ import annotations

import math
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from psdid.bounds import (
    MultiStepBounds,
    kappa,
    larger_shift_bounds,
    multi_step_bounds,
    ratio,
    single_step_factor,
)
from psdid.logger import logger
from psdid.oracle import QualityReport, SpectralOracle
from psdid.preconditioner import PreconditionerVariant
from psdid.solver import Trace, TraceRecord

BOUND_COLUMNS = [
    "run",
    "step",
    "t",
    "regime",
    "observed_ratio",
    "bound_single",
    "bound1",
    "bound2",
    "bound3",
    "violation_slack",
]

QualitySource = Union[
    None, QualityReport, Dict[Tuple[int, float], Optional[QualityReport]]
]


class VerifyConfig(BaseModel):
    relative_tolerance: float = Field(default=1e-10, gt=0.0)
    edge_tolerance: float = Field(default=1e-12, gt=0.0)
    monotone_tolerance: float = Field(default=1e-10, gt=0.0)
    multi_step: bool = True


class StepBound(BaseModel):
    """
    Check of the step from record step to step + 1 for column t. regime is
    "restricted" (shift below lambda_i), "larger_shift" or "skipped".
    """

    run: int
    i: int
    step: int
    t: int
    theta: float
    theta_next: float
    regime: str
    j: Optional[int] = None
    nu: Optional[float] = None
    epsilon: Optional[float] = None
    observed_ratio: Optional[float] = None
    bound_single: Optional[float] = None
    bound1: Optional[float] = None
    bound2: Optional[float] = None
    bound3: Optional[float] = None
    violation_slack: Optional[float] = None
    violated: bool = False
    monotone_violated: bool = False
    reason: Optional[str] = None


class BoundReport(BaseModel):
    """
    Checks of a trace. passed requires no single step, monotonicity or multi-step
    violation; the approximate second multi-step bound is never counted.
    """

    fingerprint: Optional[str] = None
    steps: List[StepBound] = []
    multi_step: Dict[str, List[MultiStepBounds]] = {}
    multi_step_violations: List[str] = []

    @property
    def violations(self) -> List[StepBound]:
        return [step for step in self.steps if step.violated]

    @property
    def monotonicity_violations(self) -> List[StepBound]:
        return [step for step in self.steps if step.monotone_violated]

    @property
    def checked(self) -> int:
        return sum(1 for step in self.steps if step.bound_single is not None)

    @property
    def passed(self) -> bool:
        return (
            not self.violations
            and not self.monotonicity_violations
            and not self.multi_step_violations
        )

    def to_frame(self) -> pd.DataFrame:
        """
        One row per checked step and column, with the single step bound and the
        multi-step bounds evaluated at the next step.
        """
        rows = [
            {
                "run": step.run,
                "step": step.step,
                "t": step.t,
                "regime": step.regime,
                "observed_ratio": step.observed_ratio,
                "bound_single": step.bound_single,
                "bound1": step.bound1,
                "bound2": step.bound2,
                "bound3": step.bound3,
                "violation_slack": step.violation_slack,
            }
            for step in self.steps
        ]
        return pd.DataFrame(rows, columns=BOUND_COLUMNS)

    def summary(self) -> Dict:
        return {
            "fingerprint": self.fingerprint,
            "checked_steps": self.checked,
            "violations": len(self.violations),
            "monotonicity_violations": len(self.monotonicity_violations),
            "multi_step_violations": self.multi_step_violations,
            "passed": self.passed,
        }


def _epsilon(
    record: TraceRecord, quality: QualitySource
) -> Optional[float]:
    if record.epsilon is not None:
        return record.epsilon
    if isinstance(quality, QualityReport):
        return quality.epsilon
    if isinstance(quality, dict):
        report = quality.get((record.run, record.sigma))
        return None if report is None else report.epsilon
    return None


def _bracket(oracle: SpectralOracle, theta: float, first: int) -> Optional[int]:
    """
    Largest j >= first with lambda_j <= theta, or first when theta lies below
    lambda_first. None when theta is not below lambda_n.
    """
    eigenvalues = oracle.eigenvalues
    j = int(np.searchsorted(eigenvalues, theta, side="right"))
    j = max(j, first)
    if j >= oracle.n:
        return None
    return j


def _check_restricted(
    oracle: SpectralOracle,
    record: TraceRecord,
    t: int,
    theta: float,
    theta_next: float,
    nu: float,
    epsilon: float,
    cfg: VerifyConfig,
) -> StepBound:
    check = StepBound(
        run=record.run,
        i=record.i,
        step=record.step,
        t=t,
        theta=theta,
        theta_next=theta_next,
        regime="restricted",
        nu=nu,
        epsilon=epsilon,
    )
    j = _bracket(oracle, theta, record.i - 1 + t)
    edge = cfg.edge_tolerance * max(1.0, abs(oracle.eigenvalue(oracle.n)))
    if j is None:
        check.regime, check.reason = "skipped", "no bracketing interval"
        return check
    lambda_j, lambda_next = oracle.eigenvalue(j), oracle.eigenvalue(j + 1)
    if theta - lambda_j <= edge or lambda_next - theta <= edge:
        check.regime, check.reason = "skipped", "interval edge"
        return check
    factor = single_step_factor(
        kappa(lambda_j, lambda_next, oracle.eigenvalue(oracle.n), nu), epsilon
    )
    check.j = j
    check.observed_ratio = ratio(theta_next, lambda_j, lambda_next)
    check.bound_single = factor * ratio(theta, lambda_j, lambda_next)
    check.violation_slack = check.observed_ratio - check.bound_single
    check.violated = (
        check.observed_ratio > check.bound_single * (1.0 + cfg.relative_tolerance)
        and theta_next - lambda_j > edge
    )
    return check


def _check_larger_shift(
    oracle: SpectralOracle,
    record: TraceRecord,
    t: int,
    theta: float,
    theta_next: float,
    sigma: float,
    cfg: VerifyConfig,
) -> StepBound:
    check = StepBound(
        run=record.run,
        i=record.i,
        step=record.step,
        t=t,
        theta=theta,
        theta_next=theta_next,
        regime="larger_shift",
        nu=sigma,
        epsilon=0.0,
    )
    i = record.i
    if t != 1 or i >= oracle.n:
        check.regime, check.reason = "skipped", "larger shift bound covers the first column"
        return check
    lambda_i, lambda_next = oracle.eigenvalue(i), oracle.eigenvalue(i + 1)
    edge = cfg.edge_tolerance * max(1.0, abs(oracle.eigenvalue(oracle.n)))
    if not lambda_i < sigma < 0.5 * (lambda_i + lambda_next):
        check.regime, check.reason = "skipped", "shift outside the larger shift window"
        return check
    if not lambda_i + edge < theta < lambda_next - edge:
        check.regime, check.reason = "skipped", "no bracketing interval"
        return check
    bounds = larger_shift_bounds(
        lambda_i, lambda_next, oracle.eigenvalue(oracle.n), sigma, theta
    )
    check.j = i
    check.observed_ratio = ratio(theta_next, lambda_i, lambda_next)
    check.bound_single = bounds.supercubic
    check.violation_slack = check.observed_ratio - check.bound_single
    check.violated = (
        check.observed_ratio > check.bound_single * (1.0 + cfg.relative_tolerance)
        and theta_next - lambda_i > edge
    )
    return check


def _multi_step(
    oracle: SpectralOracle,
    records: List[TraceRecord],
    quality: QualitySource,
    cfg: VerifyConfig,
) -> Optional[List[MultiStepBounds]]:
    first = records[0]
    sigmas = {record.sigma for record in records}
    if len(sigmas) != 1 or len(records) < 2:
        return None
    sigma = first.sigma
    if sigma >= oracle.eigenvalue(first.i):
        return None
    epsilons = [_epsilon(record, quality) for record in records[1:]]
    if any(epsilon is None for epsilon in epsilons):
        return None
    epsilon = max(epsilons)
    if epsilon >= 1.0:
        return None
    k_tilde = len(first.thetas)
    thetas = [record.thetas for record in records]
    return [
        multi_step_bounds(oracle, first.i, t, k_tilde, sigma, epsilon, thetas)
        for t in range(1, k_tilde + 1)
    ]


def verify_trace(
    trace: Trace,
    oracle: SpectralOracle,
    quality: QualitySource = None,
    cfg: Optional[VerifyConfig] = None,
) -> BoundReport:
    """
    Check every step of a trace: the single step bound of each column in its
    bracketing interval, monotone Ritz values, and the multi-step bounds of
    each run with a constant shift.
    :param trace: solver trace.
    :param oracle: spectral oracle of the traced pencil.
    :param quality: a quality report applying to every step, or reports per
    (run, sigma); per step qualities recorded in the trace take precedence.
    :param cfg: tolerances.
    :return: bound report.
    """
    cfg = cfg or VerifyConfig()
    oracle.check_fingerprint(trace.fingerprint)
    report = BoundReport(fingerprint=oracle.fingerprint)
    for run, records in trace.runs().items():
        for record, next_record in zip(records, records[1:]):
            if next_record.step != record.step + 1:
                continue
            sigma = next_record.sigma
            epsilon = _epsilon(next_record, quality)
            restricted = sigma < oracle.eigenvalue(record.i)
            exact = next_record.precond_variant == PreconditionerVariant.EXACT_SHIFT_INVERT.value
            certified = (restricted and epsilon is not None and epsilon < 1.0) or (
                not restricted and exact
            )
            for t, (theta, theta_next) in enumerate(
                zip(record.thetas, next_record.thetas), start=1
            ):
                if restricted and certified:
                    check = _check_restricted(
                        oracle, record, t, theta, theta_next, sigma, epsilon, cfg
                    )
                elif certified:
                    check = _check_larger_shift(
                        oracle, record, t, theta, theta_next, sigma, cfg
                    )
                else:
                    check = StepBound(
                        run=run,
                        i=record.i,
                        step=record.step,
                        t=t,
                        theta=theta,
                        theta_next=theta_next,
                        regime="skipped",
                        reason="preconditioner quality unknown",
                    )
                check.step = record.step
                check.monotone_violated = certified and (
                    theta_next > theta + cfg.monotone_tolerance * abs(theta)
                )
                report.steps.append(check)

        if cfg.multi_step:
            bounds = _multi_step(oracle, records, quality, cfg)
            if bounds is not None:
                report.multi_step[str(run)] = bounds
                edge = cfg.edge_tolerance * max(1.0, abs(oracle.eigenvalue(oracle.n)))
                for curves in bounds:
                    for curve in (curves.bound1, curves.bound3):
                        for step in curve.violations(cfg.relative_tolerance, edge):
                            report.multi_step_violations.append(
                                f"run {run} t {curves.t} {curve.name} step {step}"
                            )
                _attach_multi_step(report, run, bounds)

    for check in report.violations:
        logger.warning(
            f"Bound violation at run {check.run} step {check.step} t {check.t}: "
            f"observed {check.observed_ratio:.6e} > bound {check.bound_single:.6e}"
        )
    logger.info(
        f"Checked {report.checked} steps: {len(report.violations)} violations, "
        f"{len(report.monotonicity_violations)} monotonicity violations"
    )
    return report


def _attach_multi_step(report: BoundReport, run: int, bounds: List[MultiStepBounds]):
    by_column = {curves.t: curves for curves in bounds}
    for check in report.steps:
        if check.run != run or check.t not in by_column:
            continue
        curves = by_column[check.t]
        step = check.step + 1
        for name in ("bound1", "bound2", "bound3"):
            curve = getattr(curves, name)
            if curve.applicable and step < len(curve.ratios):
                value = curve.ratios[step]
                setattr(check, name, None if value is None or math.isnan(value) else value)
