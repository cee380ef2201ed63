"""
Convergence factors and bounds of the preconditioned steepest descent
iterations with implicit deflation, as functions of the spectrum, the shift
and the preconditioner quality epsilon.
"""

from __future__ import annotations

import itertools
import math
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg
import scipy.optimize
from pydantic import BaseModel, ConfigDict

from psdid.exceptions import DomainError
from psdid.linalg import Pencil, spmv
from psdid.oracle import DensePreconditioner, SpectralOracle
from psdid.solver import DeflationSet, psd_id_step

PROBE_GRID_SIZE = 181


def kappa(lambda_j: float, lambda_next: float, lambda_n: float, nu: float) -> float:
    """
    Gap ratio ((lambda_j - nu) / (lambda_next - nu)) * ((lambda_n - lambda_next) / (lambda_n - lambda_j)).
    :return: kappa in [0, 1).
    """
    if not nu < lambda_j < lambda_next <= lambda_n:
        raise DomainError(
            f"kappa needs nu < lambda_j < lambda_next <= lambda_n, got "
            f"{nu}, {lambda_j}, {lambda_next}, {lambda_n}"
        )
    if lambda_next == lambda_n:
        return 0.0
    return ((lambda_j - nu) / (lambda_next - nu)) * (
        (lambda_n - lambda_next) / (lambda_n - lambda_j)
    )


def single_step_factor(kappa_value: float, epsilon: float) -> float:
    """
    Factor ((kappa + epsilon (2 - kappa)) / ((2 - kappa) + epsilon kappa))^2 of
    the single step estimate.
    """
    if not 0.0 <= kappa_value < 1.0:
        raise DomainError(f"kappa must lie in [0, 1), got {kappa_value}")
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"epsilon must lie in [0, 1), got {epsilon}")
    return (
        (kappa_value + epsilon * (2.0 - kappa_value))
        / ((2.0 - kappa_value) + epsilon * kappa_value)
    ) ** 2


def ratio(value: float, lower: float, upper: float) -> float:
    """
    (value - lower) / (upper - value), the quantity every bound controls.
    """
    return (value - lower) / (upper - value)


def error_from_ratio(q: float, lower: float, upper: float) -> float:
    """
    Invert the ratio: value - lower = q (upper - lower) / (1 + q).
    """
    if math.isinf(q):
        return upper - lower
    return q * (upper - lower) / (1.0 + q)


class LargerShiftBounds(BaseModel):
    """
    Bounds on the next ratio (rho' - lambda_i) / (lambda_i+1 - rho') when the
    shift lies above lambda_i.
    """

    kappa: float
    supercubic_factor: float
    supercubic: float
    cubic: float
    inexact: float


def larger_shift_bounds(
    lambda_i: float,
    lambda_next: float,
    lambda_n: float,
    sigma: float,
    rho: float,
    epsilon: float = 0.0,
) -> LargerShiftBounds:
    """
    Bounds for a shift sigma in (lambda_i, (lambda_i + lambda_i+1) / 2) and an
    iterate with Rayleigh quotient rho in (lambda_i, lambda_i+1).
    :param lambda_i: eigenvalue targeted by the step.
    :param lambda_next: next eigenvalue.
    :param lambda_n: largest eigenvalue.
    :param sigma: shift.
    :param rho: Rayleigh quotient of the iterate.
    :param epsilon: quality of an inexact projected solve.
    :return: supercubic factor (kappa / (2 - kappa))^2 and the bounds it gives,
    the cubic bound q^3 and the inexact bound.
    """
    if not lambda_i < sigma < 0.5 * (lambda_i + lambda_next):
        raise DomainError(
            f"sigma = {sigma} outside ({lambda_i}, {0.5 * (lambda_i + lambda_next)})"
        )
    if not lambda_i < rho < lambda_next:
        raise DomainError(f"rho = {rho} outside ({lambda_i}, {lambda_next})")
    if not 0.0 <= epsilon < 1.0:
        raise DomainError(f"epsilon must lie in [0, 1), got {epsilon}")
    q = ratio(rho, lambda_i, lambda_next)
    kappa_value = ((lambda_i - sigma) / (lambda_next - sigma)) * (
        (lambda_n - lambda_next) / (lambda_n - lambda_i)
    )
    factor = (kappa_value / (2.0 - kappa_value)) ** 2
    inexact = (
        (rho - lambda_i + epsilon * (lambda_next - rho))
        / (lambda_next - rho + epsilon * (rho - lambda_i))
    ) ** 2 * q
    return LargerShiftBounds(
        kappa=kappa_value,
        supercubic_factor=factor,
        supercubic=factor * q,
        cubic=q**3,
        inexact=inexact,
    )


class BoundCurve(BaseModel):
    """
    A multi-step bound on (theta_t - lower) / (upper - theta_t) along the steps
    of a run, anchored at anchor_step. Steps before the anchor carry None.
    """

    name: str
    lower: float
    upper: float
    factor: Optional[float] = None
    anchor_step: Optional[int] = None
    observed: List[Optional[float]] = []
    ratios: List[Optional[float]] = []
    errors: List[Optional[float]] = []
    applicable: bool = True
    approximate: bool = False
    reason: Optional[str] = None

    def violations(
        self, relative_tolerance: float = 1e-10, edge_tolerance: float = 0.0
    ) -> List[int]:
        """
        Steps where the observed ratio exceeds the bound. Observed values within
        edge_tolerance of the lower eigenvalue never count.
        """
        return [
            step
            for step, (observed, bound) in enumerate(zip(self.observed, self.ratios))
            if observed is not None
            and bound is not None
            and observed > bound * (1.0 + relative_tolerance)
            and error_from_ratio(observed, self.lower, self.upper) > edge_tolerance
        ]


class MultiStepBounds(BaseModel):
    t: int
    bound1: BoundCurve
    bound2: BoundCurve
    bound3: BoundCurve
    bound_cr: BoundCurve


def _inapplicable(name: str, lower: float, upper: float, reason: str) -> BoundCurve:
    return BoundCurve(name=name, lower=lower, upper=upper, applicable=False, reason=reason)


def _anchored_curve(
    name: str,
    thetas: Sequence[float],
    anchors: Sequence[float],
    lower: float,
    upper: float,
    factor: float,
    approximate: bool = False,
) -> BoundCurve:
    steps = len(thetas)
    observed = [ratio(theta, lower, upper) if theta < upper else None for theta in thetas]
    anchor_step = next(
        (step for step, anchor in enumerate(anchors) if anchor < upper), None
    )
    curve = BoundCurve(
        name=name,
        lower=lower,
        upper=upper,
        factor=factor,
        anchor_step=anchor_step,
        observed=observed,
        approximate=approximate,
    )
    if anchor_step is None:
        curve.applicable = False
        curve.reason = "no step below the gap denominator"
        curve.ratios = [None] * steps
        curve.errors = [None] * steps
        return curve
    start = ratio(anchors[anchor_step], lower, upper)
    ratios: List[Optional[float]] = [None] * anchor_step
    ratios += [factor ** (step - anchor_step) * start for step in range(anchor_step, steps)]
    curve.ratios = ratios
    curve.errors = [None if q is None else error_from_ratio(q, lower, upper) for q in ratios]
    return curve


def multi_step_bounds(
    oracle: SpectralOracle,
    i: int,
    t: int,
    k_tilde: int,
    nu: float,
    epsilon: float,
    thetas: Sequence[Sequence[float]],
    tau: Optional[float] = None,
    sigma: Optional[float] = None,
) -> MultiStepBounds:
    """
    Multi-step bounds along the Ritz values of one run.

    bound1 controls (theta_t - lambda_i-1+t) / (lambda_i+t - theta_t) from the
    iterated single step factor. bound2 and bound3 control
    (theta_t - lambda_i-1+t) / (lambda_i+k~ - theta_t) from the anchoring ratio
    of theta_k~, with the subspace iteration factor (approximate) and the
    steepest descent factor respectively. bound_cr controls
    (theta_t - lambda_i-1+t) / (lambda_n - theta_t) for exact shift-invert
    from the initial subspace through tau.

    :param oracle: spectral oracle.
    :param i: deflation index of the run, 1-based.
    :param t: column index, 1-based.
    :param k_tilde: block size.
    :param nu: parameter below lambda_i.
    :param epsilon: preconditioner quality.
    :param thetas: Ritz values of every step, each of length k_tilde.
    :param tau: initial subspace constant, when known.
    :param sigma: shift of an exact shift-invert run, when bound_cr applies.
    :return: the four bound curves.
    """
    n = oracle.n
    if not 1 <= t <= k_tilde:
        raise DomainError(f"Column index {t} outside [1, {k_tilde}]")
    lower = oracle.eigenvalue(i - 1 + t)
    lambda_n = oracle.eigenvalue(n)
    if nu >= oracle.eigenvalue(i):
        raise DomainError(f"nu = {nu} must lie below lambda_{i}")
    column = [float(step_thetas[t - 1]) for step_thetas in thetas]
    anchors = [float(step_thetas[k_tilde - 1]) for step_thetas in thetas]

    if i + t <= n and oracle.eigenvalue(i + t) > lower:
        upper1 = oracle.eigenvalue(i + t)
        factor1 = single_step_factor(kappa(lower, upper1, lambda_n, nu), epsilon)
        bound1 = _anchored_curve("bound1", column, column, lower, upper1, factor1)
    else:
        bound1 = _inapplicable("bound1", lower, lower, "degenerate gap")

    if i + k_tilde <= n and oracle.eigenvalue(i + k_tilde) > lower:
        upper = oracle.eigenvalue(i + k_tilde)
        gap_ratio = (lower - nu) / (upper - nu)
        factor2 = (epsilon + (1.0 - epsilon) * gap_ratio) ** 2
        factor3 = single_step_factor(kappa(lower, upper, lambda_n, nu), epsilon)
        bound2 = _anchored_curve("bound2", column, anchors, lower, upper, factor2, True)
        bound3 = _anchored_curve("bound3", column, anchors, lower, upper, factor3)
    else:
        upper = oracle.eigenvalue(min(i + k_tilde, n))
        bound2 = _inapplicable("bound2", lower, upper, "degenerate gap")
        bound3 = _inapplicable("bound3", lower, upper, "degenerate gap")

    bound_cr = _cluster_robust_curve(oracle, i, t, k_tilde, column, tau, sigma)
    return MultiStepBounds(t=t, bound1=bound1, bound2=bound2, bound3=bound3, bound_cr=bound_cr)


def _cluster_robust_curve(
    oracle: SpectralOracle,
    i: int,
    t: int,
    k_tilde: int,
    column: Sequence[float],
    tau: Optional[float],
    sigma: Optional[float],
) -> BoundCurve:
    n = oracle.n
    lower = oracle.eigenvalue(i - 1 + t)
    lambda_n = oracle.eigenvalue(n)
    if sigma is None or tau is None:
        return _inapplicable("bound_cr", lower, lambda_n, "needs an exact shift and tau")
    if not math.isfinite(tau):
        return _inapplicable("bound_cr", lower, lambda_n, "deficient initial subspace")
    if sigma >= oracle.eigenvalue(i):
        return _inapplicable("bound_cr", lower, lambda_n, "shift not below lambda_i")
    if i + k_tilde > n or not oracle.eigenvalue(i + k_tilde) > lower:
        return _inapplicable("bound_cr", lower, lambda_n, "degenerate gap")
    kappa_value = kappa(lower, oracle.eigenvalue(i + k_tilde), lambda_n, sigma)
    factor = (kappa_value / (2.0 - kappa_value)) ** 2
    start = (lower - sigma) / (lambda_n - sigma) * tau
    ratios = [factor**step * start for step in range(len(column))]
    return BoundCurve(
        name="bound_cr",
        lower=lower,
        upper=lambda_n,
        factor=factor,
        anchor_step=0,
        observed=[ratio(theta, lower, lambda_n) for theta in column],
        ratios=ratios,
        errors=[error_from_ratio(q, lower, lambda_n) for q in ratios],
    )


def compute_tau(
    Z0, oracle: SpectralOracle, p: Pencil, i: int, k_tilde: int, sigma: float
) -> float:
    """
    Tangent square of the largest principal angle between span{E0},
    E0 = Lambda_sigma^1/2 V^T S Z0, and the span of the first k~ coordinate
    vectors.
    :param Z0: initial block, S-orthogonal to the accepted eigenvectors.
    :param oracle: spectral oracle.
    :param p: pencil.
    :param i: deflation index, 1-based.
    :param k_tilde: block size.
    :param sigma: shift below lambda_i.
    :return: tau, infinite when the initial block misses a target direction.
    """
    shifted = oracle.eigenvalues[i - 1 :] - sigma
    if np.any(shifted <= 0.0):
        raise DomainError(f"sigma = {sigma} must lie below lambda_{i}")
    Z0 = np.asarray(Z0, dtype=np.float64).reshape(p.n, -1)
    E0 = np.sqrt(shifted)[:, None] * (oracle.restricted_basis(i).T @ spmv(p.S, Z0))
    Q, _ = scipy.linalg.qr(E0, mode="economic")
    cosines = scipy.linalg.svdvals(Q[:k_tilde, :])
    smallest = float(np.min(cosines)) if cosines.size >= k_tilde else 0.0
    if smallest <= 1e-14:
        return math.inf
    return (1.0 - smallest**2) / smallest**2


class SharpnessReport(BaseModel):
    """
    Worst observed single step factors at decreasing ratio distances delta, next
    to the limit factor of the single step estimate.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    j: int
    nu: float
    epsilon: float
    limit_factor: float
    deltas: List[float]
    observed_factors: List[float]

    @property
    def relative_factors(self) -> List[float]:
        if self.limit_factor == 0.0:
            return [0.0 for _ in self.observed_factors]
        return [observed / self.limit_factor for observed in self.observed_factors]


def _coefficient_ratio(coefficients: np.ndarray, eigenvalues: np.ndarray, j: int) -> float:
    weights = coefficients**2
    numerator = float(np.sum(weights * (eigenvalues - eigenvalues[j - 1])))
    denominator = float(np.sum(weights * (eigenvalues[j] - eigenvalues)))
    return numerator / denominator


def sharpness_probe(
    oracle: SpectralOracle,
    p: Pencil,
    j: int,
    nu: float,
    epsilon: float,
    deltas: Sequence[float],
) -> SharpnessReport:
    """
    Worst single step factor of one PSD-id step over starting vectors in
    span{u_j, u_j+1, u_n} whose ratio to (lambda_j, lambda_j+1) is delta, with
    the accepted eigenvectors u_1 ... u_j-1 deflated and the preconditioner
    K = Phi diag((1 + epsilon s) / (lambda - nu)) Phi^T for every sign pattern s.
    :param oracle: spectral oracle.
    :param p: pencil.
    :param j: eigenvalue index, 1-based, below n.
    :param nu: parameter below lambda_j.
    :param epsilon: preconditioner quality.
    :param deltas: ratio distances to evaluate.
    :return: observed factors and the limit factor.
    """
    n = oracle.n
    if not 1 <= j < n:
        raise DomainError(f"Index {j} outside [1, {n - 1}]")
    eigenvalues = oracle.eigenvalues
    lambda_j, lambda_next, lambda_n = eigenvalues[j - 1], eigenvalues[j], eigenvalues[n - 1]
    limit = single_step_factor(kappa(lambda_j, lambda_next, lambda_n, nu), epsilon)
    if nu >= lambda_j:
        raise DomainError(f"nu = {nu} must lie below lambda_{j}")
    defl = DeflationSet(
        U=oracle.vectors[:, : j - 1].copy(),
        eigenvalues=[float(value) for value in eigenvalues[: j - 1]],
        residual_norms=[0.0] * (j - 1),
    )
    planar = j + 1 == n
    corners = [j - 1, j] if planar else [j - 1, j, n - 1]
    signs = [(0.0,)] if epsilon == 0.0 else list(itertools.product((-1.0, 1.0), repeat=len(corners)))
    preconditioners = []
    for pattern in signs:
        scales = np.ones(n)
        if epsilon > 0.0:
            scales[corners] = 1.0 + epsilon * np.asarray(pattern)
        # deflated eigenvectors at or below nu keep a positive weight
        weights = np.full(n, 1.0 / (lambda_j - nu))
        above = eigenvalues > nu
        weights[above] = scales[above] / (eigenvalues[above] - nu)
        preconditioners.append(DensePreconditioner.from_spectrum(oracle, p, weights, nu))

    def observed_factor(phi: float, delta: float, K: DensePreconditioner) -> float:
        target = (lambda_j + delta * lambda_next) / (1.0 + delta)
        gaps = np.array([0.0, lambda_next - lambda_j, lambda_n - lambda_j])
        if planar:
            mix = np.array([1.0, 0.0])
            gap = gaps[1]
        else:
            mix = np.array([math.cos(phi), math.sin(phi)])
            gap = mix[0] ** 2 * gaps[1] + mix[1] ** 2 * gaps[2]
        weight = (target - lambda_j) / gap
        coefficients = np.zeros(n)
        coefficients[corners[0]] = math.sqrt(1.0 - weight)
        coefficients[corners[1:]] = math.sqrt(weight) * mix[: len(corners) - 1]
        z = oracle.vectors @ coefficients
        start = _coefficient_ratio(coefficients, eigenvalues, j)
        z_next = psd_id_step(z, defl, K, p)
        next_coefficients = oracle.vectors.T @ spmv(p.S, z_next)
        return _coefficient_ratio(next_coefficients, eigenvalues, j) / start

    observed: List[float] = []
    grid = np.linspace(0.0, 0.5 * math.pi, PROBE_GRID_SIZE)
    for delta in deltas:
        worst = -math.inf
        for K in preconditioners:
            if planar:
                worst = max(worst, observed_factor(0.0, delta, K))
                continue
            values = [observed_factor(phi, delta, K) for phi in grid]
            best = int(np.argmax(values))
            low = grid[max(best - 1, 0)]
            high = grid[min(best + 1, len(grid) - 1)]
            refined = scipy.optimize.minimize_scalar(
                lambda phi: -observed_factor(phi, delta, K),
                bounds=(low, high),
                method="bounded",
                options={"xatol": 1e-10},
            )
            worst = max(worst, values[best], -float(refined.fun))
        observed.append(worst)
    return SharpnessReport(
        j=j,
        nu=nu,
        epsilon=epsilon,
        limit_factor=limit,
        deltas=[float(delta) for delta in deltas],
        observed_factors=observed,
    )
