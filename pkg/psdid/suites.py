"""
Acceptance suites run by `psdid verify`. Every suite builds its own problem,
runs the solver or the analysis on it and compares measured values with
expected ones.
"""

from __future__ import annotations

import filecmp
import math
import os
import tempfile
from typing import Any, ClassVar, Dict, List, Type

import numpy as np
from pydantic import BaseModel, Field

from psdid.bounds import larger_shift_bounds, ratio, sharpness_probe
from psdid.config import BlockPolicy, ExperimentConfig, ProblemSource
from psdid.core import TRACE_FILE, solve
from psdid.exceptions import UnknownSuiteError
from psdid.linalg import Pencil, SparseMatrix, rayleigh_quotient, s_norm
from psdid.logger import logger
from psdid.oracle import QualityRecorder, dense_oracle, effective_form, quality_epsilon
from psdid.preconditioner import Preconditioner, PreconditionerSpec, PreconditionerVariant
from psdid.problems import Slit, SlitRectangleSpec, build_slit_laplacian, mm_read, mm_write
from psdid.shifts import ShiftStrategy, ShiftVariant
from psdid.solver import DeflationSet, RunConfig, Trace, multi_run, psd_id_step, run
from psdid.verification import verify_trace

PLANE_WIDTH = 1.5
PLANE_HEIGHT = 1.0
SHORT_SLITS = [Slit(x=0.5, y0=0.45, y1=0.55), Slit(x=1.0, y0=0.45, y1=0.55)]
LONG_SLITS = [Slit(x=0.5, y0=0.1, y1=0.9), Slit(x=1.0, y0=0.1, y1=0.9)]
SHORT_SLIT_EIGENVALUES = [27.07834, 38.24327, 45.24858, 49.32646, 58.36810, 78.91626]
EIGENVALUE_TOLERANCE = 5e-4
CERTIFICATE_LIMIT = 1e-6

SUITES: Dict[str, Type["AcceptanceSuite"]] = {}


def register_suite(suite_name: str):
    """
    This decorator registers a new AcceptanceSuite class in SUITES registry.
    :param suite_name: name of the suite on the command line.
    :return: the registered AcceptanceSuite class.
    """

    def decorator(decorated_class):
        if suite_name not in SUITES:
            SUITES[suite_name] = decorated_class
        return decorated_class

    return decorator


def get_suite(suite_name: str) -> Type["AcceptanceSuite"]:
    """
    Get a registered AcceptanceSuite class by name.
    :param suite_name: registered name of the desired suite.
    :return: registered AcceptanceSuite class.
    """
    if suite_name not in SUITES:
        raise UnknownSuiteError(suite_name, registered_suites())
    return SUITES[suite_name]


def registered_suites() -> List[str]:
    """
    Get a list of registered suite names.
    :return: list of registered suite names.
    """
    return list(SUITES.keys())


def slit_rectangle(slits: List[Slit], h: float) -> SlitRectangleSpec:
    return SlitRectangleSpec(width=PLANE_WIDTH, height=PLANE_HEIGHT, h=h, slits=slits)


def slit_pencil(slits: List[Slit], h: float) -> Pencil:
    pencil, _ = build_slit_laplacian(slit_rectangle(slits, h))
    return pencil


def diagonal_pencil(values) -> Pencil:
    return Pencil.from_dense(np.diag(np.asarray(values, dtype=np.float64)))


class Check(BaseModel):
    name: str
    measured: Any
    expected: str
    passed: bool


class SuiteReport(BaseModel):
    suite: str
    checks: List[Check] = []

    @property
    def passed(self) -> bool:
        return all(check.passed for check in self.checks)

    def add(self, name: str, measured: Any, expected: str, passed: bool):
        check = Check(name=name, measured=measured, expected=expected, passed=bool(passed))
        self.checks.append(check)
        log = logger.info if check.passed else logger.error
        log(f"[{self.suite}] {name}: measured {measured}, expected {expected}")

    def to_text(self) -> str:
        lines = [
            f"{'PASS' if check.passed else 'FAIL'}  {check.name}: "
            f"measured {check.measured}, expected {check.expected}"
            for check in self.checks
        ]
        lines.append(f"{self.suite}: {'passed' if self.passed else 'FAILED'}")
        return "\n".join(lines)


class AcceptanceSuite(BaseModel):
    """
    An acceptance suite reproduces one documented behaviour of the solver or of
    the analysis. Slow suites take minutes.
    """

    slow: ClassVar[bool] = False

    def run(self) -> SuiteReport:
        """
        Abstract method.
        Execute the suite.
        :return: measured and expected values of every check.
        """
        raise NotImplementedError()

    @property
    def suite_name(self) -> str:
        return next(name for name, suite in SUITES.items() if suite is type(self))

    def report(self) -> SuiteReport:
        return SuiteReport(suite=self.suite_name)


@register_suite("node-counts")
class NodeCountSuite(AcceptanceSuite):
    def run(self) -> SuiteReport:
        report = self.report()
        cases = [
            ("short slits, h = 1/80", slit_rectangle(SHORT_SLITS, 1 / 80), 9383),
            ("long slits, h = 1/80", slit_rectangle(LONG_SLITS, 1 / 80), 9271),
            ("short slits, h = 1/16", slit_rectangle(SHORT_SLITS, 1 / 16), 343),
            ("long slits, h = 1/20", slit_rectangle(LONG_SLITS, 1 / 20), 517),
            (
                "unit square, h = 1/4",
                SlitRectangleSpec(width=1.0, height=1.0, h=0.25),
                9,
            ),
        ]
        for label, spec, expected in cases:
            pencil, _ = build_slit_laplacian(spec)
            report.add(label, pencil.n, f"n = {expected}", pencil.n == expected)
        return report


@register_suite("sharpness")
class SharpnessSuite(AcceptanceSuite):
    """
    The single step estimate is attained in a three dimensional invariant
    subspace when the ratio goes to zero, and is exact in a two dimensional one.
    """

    delta: float = 1e-8

    def run(self) -> SuiteReport:
        report = self.report()
        pencil = diagonal_pencil(np.arange(1.0, 11.0))
        oracle = dense_oracle(pencil)
        sharpness = sharpness_probe(oracle, pencil, 1, 0.0, 0.0, [self.delta])
        relative = sharpness.relative_factors[0]
        report.add(
            "observed / limit factor",
            relative,
            f"in [0.99, 1.0] (limit {sharpness.limit_factor:.6f})",
            0.99 <= relative <= 1.0 + 1e-9,
        )

        inexact = sharpness_probe(oracle, pencil, 1, 0.0, 0.3, [0.5])
        report.add(
            "observed factor with epsilon = 0.3",
            inexact.observed_factors[0],
            f"<= {inexact.limit_factor:.6f}",
            inexact.observed_factors[0] <= inexact.limit_factor * (1.0 + 1e-8),
        )

        planar_pencil = diagonal_pencil([1.0, 2.0, 3.0])
        planar_oracle = dense_oracle(planar_pencil)
        planar = sharpness_probe(planar_oracle, planar_pencil, 2, 0.0, 0.0, [0.5])
        report.add(
            "two dimensional subspace, next ratio",
            planar.observed_factors[0] * 0.5,
            "<= 1e-12",
            planar.observed_factors[0] * 0.5 <= 1e-12,
        )
        return report


@register_suite("epsilon-exact")
class EpsilonExactSuite(AcceptanceSuite):
    def run(self) -> SuiteReport:
        report = self.report()
        cases = [
            ("diagonal pencil, sigma = 20", diagonal_pencil(np.arange(21.0, 41.0)), 20.0),
            ("short slits, h = 1/16", slit_pencil(SHORT_SLITS, 1 / 16), None),
        ]
        for label, pencil, sigma in cases:
            oracle = dense_oracle(pencil)
            if sigma is None:
                sigma = 0.75 * oracle.eigenvalue(1)
            K = Preconditioner.build(
                PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT, shift=sigma),
                pencil,
            )
            restricted = effective_form(K, oracle, 1, sigma)
            quality = quality_epsilon(restricted)
            report.add(f"{label}: epsilon", quality.epsilon, "<= 1e-10", quality.epsilon <= 1e-10)
            report.add(
                f"{label}: K~ diagonal defect",
                restricted.diagonal_defect,
                "<= 1e-8",
                restricted.diagonal_defect is not None and restricted.diagonal_defect <= 1e-8,
            )
        return report


@register_suite("epsilon-identity")
class EpsilonIdentitySuite(AcceptanceSuite):
    def run(self) -> SuiteReport:
        report = self.report()
        pencil = diagonal_pencil([1.0, 4.0])
        oracle = dense_oracle(pencil)
        K = Preconditioner.build(
            PreconditionerSpec(variant=PreconditionerVariant.IDENTITY), pencil
        )
        quality = quality_epsilon(effective_form(K, oracle, 1, 0.0))
        report.add("epsilon", quality.epsilon, "0.6", abs(quality.epsilon - 0.6) <= 1e-12)
        report.add("omega", quality.omega, "0.4", abs(quality.omega - 0.4) <= 1e-12)
        return report


@register_suite("supercubic")
class SupercubicSuite(AcceptanceSuite):
    """
    One PSD-id step with the shift equal to the Rayleigh quotient of the
    iterate, solved on the complement of span{U, z}, against the cubic and the
    larger shift bounds.
    """

    seeds: int = Field(default=20, ge=1)
    h: float = 1 / 16
    i: int = 2
    window: float = 0.1

    def run(self) -> SuiteReport:
        report = self.report()
        pencil = slit_pencil(SHORT_SLITS, self.h)
        oracle = dense_oracle(pencil)
        i = self.i
        lambda_i, lambda_next = oracle.eigenvalue(i), oracle.eigenvalue(i + 1)
        lambda_n = oracle.eigenvalue(oracle.n)
        defl = DeflationSet(
            U=oracle.vectors[:, : i - 1].copy(),
            eigenvalues=[float(value) for value in oracle.eigenvalues[: i - 1]],
            residual_norms=[0.0] * (i - 1),
        )
        worst_cubic = 0.0
        worst_supercubic = 0.0
        for seed in range(self.seeds):
            rng = np.random.default_rng(seed)
            tail = rng.uniform(-1.0, 1.0, size=oracle.n - i)
            spread = float(np.sum(tail**2 * (oracle.eigenvalues[i:] - lambda_i)))
            # rho(z) - lambda_i stays below window * (lambda_i+1 - lambda_i)
            scale = math.sqrt(self.window * (lambda_next - lambda_i) / spread)
            coefficients = np.concatenate([[1.0], scale * tail])
            z = oracle.restricted_basis(i) @ coefficients
            z = z / s_norm(pencil.S, z)
            rho = rayleigh_quotient(pencil, z)
            K = Preconditioner.build(
                PreconditionerSpec(
                    variant=PreconditionerVariant.PROJECTED_INNER_KRYLOV,
                    shift=rho,
                    tolerance=1e-10,
                    max_iterations=5000,
                ),
                pencil,
            )
            z_next = psd_id_step(z, defl, K, pencil)
            observed = ratio(rayleigh_quotient(pencil, z_next), lambda_i, lambda_next)
            bounds = larger_shift_bounds(lambda_i, lambda_next, lambda_n, rho, rho)
            worst_cubic = max(worst_cubic, observed / bounds.cubic)
            worst_supercubic = max(worst_supercubic, observed / bounds.supercubic)
            logger.debug(
                f"Seed {seed}: q = {ratio(rho, lambda_i, lambda_next):.3e}, next {observed:.3e}, "
                f"supercubic bound {bounds.supercubic:.3e}"
            )
        report.add(
            "largest observed / cubic bound", worst_cubic, "<= 1", worst_cubic <= 1.0 + 1e-6
        )
        report.add(
            "largest observed / supercubic bound",
            worst_supercubic,
            "<= 1",
            worst_supercubic <= 1.0 + 1e-6,
        )
        return report


@register_suite("cluster")
class ClusterSuite(AcceptanceSuite):
    """
    Block iteration on the three room domain, whose eigenvalues come in
    clusters of three, with the block as wide as the second cluster.
    """

    seeds: int = Field(default=5, ge=1)
    h: float = 1 / 20
    i: int = 4
    k_tilde: int = 3
    tolerance: float = 1e-9
    max_steps: int = 60

    def run(self) -> SuiteReport:
        report = self.report()
        pencil = slit_pencil(LONG_SLITS, self.h)
        oracle = dense_oracle(pencil)
        i = self.i
        # shift between the clusters
        sigma = 0.5 * (oracle.eigenvalue(i - 1) + oracle.eigenvalue(i))
        defl = DeflationSet(
            U=oracle.vectors[:, : i - 1].copy(),
            eigenvalues=[float(value) for value in oracle.eigenvalues[: i - 1]],
            residual_norms=[0.0] * (i - 1),
        )
        spec = PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT, shift=sigma)
        quality = quality_epsilon(
            effective_form(Preconditioner.build(spec, pencil), oracle, i, sigma)
        )
        cfg = RunConfig(
            k=self.k_tilde,
            block_size=self.k_tilde,
            shift=ShiftStrategy(sigma0=sigma),
            preconditioner=spec,
            tolerance=self.tolerance,
            max_steps=self.max_steps,
        )

        violations: List[str] = []
        bound3_excess = 0
        bound1_factors: List[float] = []
        applicable = True
        for seed in range(self.seeds):
            Z0 = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(pencil.n, self.k_tilde))
            _, records = run(pencil, defl, Z0, cfg)
            trace = Trace(records=records, fingerprint=pencil.fingerprint())
            bound_report = verify_trace(trace, oracle, quality)
            violations += [f"seed {seed}: {entry}" for entry in bound_report.multi_step_violations]
            if bound_report.violations or bound_report.monotonicity_violations:
                violations.append(f"seed {seed}: single step bound or monotonicity")
            columns = bound_report.multi_step.get("0", [])
            applicable = applicable and len(columns) == self.k_tilde
            for curves in columns:
                applicable = applicable and curves.bound3.applicable
                if curves.t <= 2:
                    bound1_factors.append(curves.bound1.factor)
                for b2, b3 in zip(curves.bound2.ratios, curves.bound3.ratios):
                    if b2 is not None and b3 is not None and b3 > b2 * (1.0 + 1e-12):
                        bound3_excess += 1

        report.add(
            "multi-step bounds evaluated", applicable, "bound3 applicable on every column", applicable
        )
        report.add("bound violations", len(violations), "0", not violations)
        report.add("steps with bound3 > bound2", bound3_excess, "0", bound3_excess == 0)
        smallest = min(bound1_factors) if bound1_factors else math.nan
        report.add(
            "smallest bound1 factor in the cluster",
            smallest,
            ">= 0.99",
            bool(bound1_factors) and smallest >= 0.99,
        )
        return report


@register_suite("bound-validity")
class BoundValiditySuite(AcceptanceSuite):
    """
    Single step bounds on solver traces of the short slit domain with exact
    shift-invert and with minimum residual inner solves of several tolerances,
    the quality of inexact steps measured step by step.
    """

    seeds: int = Field(default=20, ge=1)
    h: float = 1 / 16
    inner_tolerances: List[float] = [0.5, 0.1, 0.01]
    max_steps: int = 40

    def run(self) -> SuiteReport:
        report = self.report()
        pencil = slit_pencil(SHORT_SLITS, self.h)
        oracle = dense_oracle(pencil)
        sigma = 0.75 * oracle.eigenvalue(1)
        specs = [PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT, shift=sigma)]
        specs += [
            PreconditionerSpec(
                variant=PreconditionerVariant.INNER_KRYLOV, shift=sigma, tolerance=tolerance
            )
            for tolerance in self.inner_tolerances
        ]
        defl = DeflationSet.empty(pencil.n)
        for spec in specs:
            label = spec.variant.value
            if spec.variant == PreconditionerVariant.INNER_KRYLOV:
                label += f" (tolerance {spec.tolerance})"
            cfg = RunConfig(
                k=2,
                block_size=3,
                shift=ShiftStrategy(sigma0=sigma),
                preconditioner=spec,
                tolerance=1e-8,
                max_steps=self.max_steps,
            )
            quality = None
            if spec.variant == PreconditionerVariant.EXACT_SHIFT_INVERT:
                quality = quality_epsilon(
                    effective_form(Preconditioner.build(spec, pencil), oracle, 1, sigma)
                )
            checked = violations = monotone = 0
            for seed in range(self.seeds):
                Z0 = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(pencil.n, 3))
                hook = None if quality is not None else QualityRecorder(oracle, pencil)
                _, records = run(pencil, defl, Z0, cfg, step_hook=hook)
                trace = Trace(records=records, fingerprint=pencil.fingerprint())
                bound_report = verify_trace(trace, oracle, quality)
                checked += bound_report.checked
                violations += len(bound_report.violations)
                monotone += len(bound_report.monotonicity_violations)
            report.add(f"{label}: checked steps", checked, "> 0", checked > 0)
            report.add(f"{label}: bound violations", violations, "0", violations == 0)
            report.add(f"{label}: monotonicity violations", monotone, "0", monotone == 0)
        return report


@register_suite("mm-roundtrip")
class MatrixMarketRoundTripSuite(AcceptanceSuite):
    def run(self) -> SuiteReport:
        report = self.report()
        matrices = {
            "short slit Laplacian": slit_pencil(SHORT_SLITS, 1 / 16).H,
            "general matrix": SparseMatrix.from_dense(
                np.array([[1.0 / 3.0, math.pi, 0.0], [0.0, math.e, -1e-300], [2.0, 0.0, 7.0]])
            ),
        }
        with tempfile.TemporaryDirectory() as directory:
            for label, matrix in matrices.items():
                path = os.path.join(directory, "matrix.mtx")
                mm_write(matrix, path)
                back = mm_read(path)
                identical = (
                    back.matrix.shape == matrix.matrix.shape
                    and np.array_equal(back.matrix.indptr, matrix.matrix.indptr)
                    and np.array_equal(back.matrix.indices, matrix.matrix.indices)
                    and np.array_equal(back.matrix.data, matrix.matrix.data)
                )
                report.add(f"{label}: bit-exact", identical, "True", identical)
                report.add(
                    f"{label}: symmetric flag",
                    back.symmetric,
                    str(matrix.symmetric),
                    back.symmetric == matrix.symmetric,
                )
        return report


@register_suite("determinism")
class DeterminismSuite(AcceptanceSuite):
    """
    Two solves of the same configuration give byte-identical traces.
    """

    def run(self) -> SuiteReport:
        report = self.report()
        cfg = ExperimentConfig(
            schema_version=1,
            problem=ProblemSource(generator=slit_rectangle(SHORT_SLITS, 1 / 16)),
            targets=2,
            policy=BlockPolicy(k=1, block_size=2),
            shift=ShiftStrategy(sigma0=10.0),
            seed=7,
        )
        with tempfile.TemporaryDirectory() as first, tempfile.TemporaryDirectory() as second:
            solve(cfg, first)
            solve(cfg, second)
            identical = filecmp.cmp(
                os.path.join(first, TRACE_FILE), os.path.join(second, TRACE_FILE), shallow=False
            )
        report.add("trace.csv byte-identical", identical, "True", identical)
        return report


@register_suite("slit-eigenvalues")
class SlitEigenvalueSuite(AcceptanceSuite):
    """
    Six smallest eigenvalues of the short slit domain at h = 1/80 by three runs
    of two pairs with a block of three, exact shift-invert at sigma = 20 and
    then at the last accepted eigenvalue.
    """

    slow: ClassVar[bool] = True

    def run(self) -> SuiteReport:
        report = self.report()
        pencil = slit_pencil(SHORT_SLITS, 1 / 80)
        cfg = RunConfig(
            k=2,
            block_size=3,
            shift=ShiftStrategy(variant=ShiftVariant.PREV_EIG, sigma0=20.0),
            preconditioner=PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT),
            tolerance=1e-8,
            max_steps=500,
        )
        result = multi_run(pencil, len(SHORT_SLIT_EIGENVALUES), cfg)
        report.add("converged", result.converged, "True", result.converged)
        computed = result.deflation.eigenvalues
        for j, expected in enumerate(SHORT_SLIT_EIGENVALUES, start=1):
            value = computed[j - 1] if j <= len(computed) else math.nan
            report.add(
                f"lambda_{j}",
                value,
                f"{expected} +- {EIGENVALUE_TOLERANCE}",
                abs(value - expected) <= EIGENVALUE_TOLERANCE,
            )
        radii = [float(radius) for run_result in result.runs for radius in run_result.certificate_radii]
        largest = max(radii) if radii else math.inf
        report.add(
            "largest certificate radius", largest, f"<= {CERTIFICATE_LIMIT}", largest <= CERTIFICATE_LIMIT
        )
        return report


def run_suite(suite_name: str) -> SuiteReport:
    """
    Run a registered suite with its default settings.
    :param suite_name: registered name.
    :return: suite report.
    """
    suite = get_suite(suite_name)()
    logger.info(f"Running suite {suite_name}")
    return suite.run()
