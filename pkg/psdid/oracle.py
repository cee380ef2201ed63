"""
Dense spectral oracle of a pencil and the quantities of the restricted
formulation built on it: the effective form K~ = V^T S K S V of a preconditioner
on the non-deflated eigenvectors V, and its quality parameter epsilon.
"""

from __future__ import annotations

from typing import Dict, Optional, Tuple

import numpy as np
import scipy.linalg
import scipy.optimize
from pydantic import BaseModel, ConfigDict, model_validator
from pydantic_core import PydanticCustomError

from psdid.exceptions import (
    DenseLimitError,
    DomainError,
    FingerprintMismatchError,
    IndefinitePreconditionerError,
    NotPositiveDefiniteError,
)
from psdid.linalg import DENSE_LIMIT, DenseBlock, Pencil, RitzSet, dense_sym_eig, spmv
from psdid.logger import logger
from psdid.preconditioner import (
    PreconditionedBlock,
    Preconditioner,
    PreconditionerSpec,
    PreconditionerVariant,
)

DIAGONALITY_TOLERANCE = 1e-8


class SpectralOracle(BaseModel):
    """
    All eigenpairs of a pencil: ascending eigenvalues and S-orthonormal
    eigenvectors as columns.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    eigenvalues: np.ndarray
    vectors: np.ndarray
    fingerprint: str

    @property
    def n(self) -> int:
        return len(self.eigenvalues)

    def eigenvalue(self, j: int) -> float:
        """
        j-th smallest eigenvalue, 1-based.
        """
        return float(self.eigenvalues[j - 1])

    def restricted_basis(self, i: int) -> np.ndarray:
        """
        Eigenvectors i to n, 1-based.
        """
        return self.vectors[:, i - 1 :]

    def check_fingerprint(self, fingerprint: Optional[str]):
        if fingerprint is not None and fingerprint != self.fingerprint:
            raise FingerprintMismatchError(self.fingerprint, fingerprint)


def dense_oracle(p: Pencil, dense_limit: int = DENSE_LIMIT) -> SpectralOracle:
    """
    Solve the pencil densely: Cholesky factorisation S = L L^T, symmetric
    eigensolver on L^-1 H L^-T, back transformation by L^-T.
    :param p: pencil.
    :param dense_limit: largest accepted dimension.
    :return: spectral oracle.
    """
    n = p.n
    if n > dense_limit:
        raise DenseLimitError(n, dense_limit)
    H = p.H.toarray()
    if p.S.is_identity:
        values, W = dense_sym_eig(0.5 * (H + H.T), dense_limit)
        vectors = W
    else:
        try:
            L = scipy.linalg.cholesky(p.S.toarray(), lower=True)
        except scipy.linalg.LinAlgError as e:
            raise NotPositiveDefiniteError(f"Cholesky factorisation of S failed: {e}")
        half = scipy.linalg.solve_triangular(L, H, lower=True)
        reduced = scipy.linalg.solve_triangular(L, half.T, lower=True)
        values, W = dense_sym_eig(0.5 * (reduced + reduced.T), dense_limit)
        vectors = scipy.linalg.solve_triangular(L.T, W, lower=False)
        s_norms = np.sqrt(np.sum(vectors * spmv(p.S, vectors), axis=0))
        vectors = vectors / s_norms
    logger.debug(f"Dense oracle of a pencil of order {n}: lambda_1 = {values[0]}")
    return SpectralOracle(eigenvalues=values, vectors=vectors, fingerprint=p.fingerprint())


class RestrictedOperators(BaseModel):
    """
    Restricted formulation at deflation index i and parameter nu: eigenvectors
    V = [u_i, ..., u_n], the shifted spectrum lambda_j - nu of V and the
    effective form K~ of a preconditioner.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    i: int
    nu: float
    V: np.ndarray
    shifted: np.ndarray
    K_tilde: np.ndarray
    asymmetry: float = 0.0
    definite: bool = True
    smallest_eigenvalue: Optional[float] = None
    diagonal_defect: Optional[float] = None

    @model_validator(mode="after")
    def shifted_spectrum_positive(self) -> RestrictedOperators:
        if np.any(self.shifted <= 0.0):
            raise PydanticCustomError(
                "nu_not_below_spectrum", "nu must lie below every restricted eigenvalue"
            )
        if self.K_tilde.shape != (len(self.shifted), len(self.shifted)):
            raise PydanticCustomError(
                "effective_form_shape", "K~ must be square of the restricted dimension"
            )
        return self

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.shifted + self.nu

    @property
    def symmetric_part(self) -> np.ndarray:
        return 0.5 * (self.K_tilde + self.K_tilde.T)


def effective_form(
    K: Preconditioner, oracle: SpectralOracle, i: int, nu: float
) -> RestrictedOperators:
    """
    Form K~ = (SV)^T K (SV) by applying K to the columns of SV, and check
    whether K is effectively positive definite.
    :param K: preconditioner of the oracle's pencil.
    :param oracle: spectral oracle.
    :param i: deflation index, 1-based.
    :param nu: parameter below lambda_i.
    :return: restricted operators with symmetry and definiteness flags.
    """
    if not 1 <= i <= oracle.n:
        raise DomainError(f"Deflation index {i} outside [1, {oracle.n}]")
    if nu >= oracle.eigenvalue(i):
        raise DomainError(f"nu = {nu} must lie below lambda_{i} = {oracle.eigenvalue(i)}")
    oracle.check_fingerprint(K.pencil.fingerprint())

    V = oracle.restricted_basis(i)
    SV = spmv(K.pencil.S, V)
    K_tilde = SV.T @ K.apply(SV)
    scale = max(float(np.linalg.norm(K_tilde, "fro")), np.finfo(float).tiny)
    asymmetry = float(np.linalg.norm(K_tilde - K_tilde.T, "fro")) / scale
    symmetric = 0.5 * (K_tilde + K_tilde.T)
    smallest = float(scipy.linalg.eigvalsh(symmetric)[0])
    definite = smallest > 0.0
    if not definite:
        logger.warning(
            f"Preconditioner {K.label} is not effectively positive definite at i = {i} "
            f"(smallest eigenvalue of K~ {smallest:.3e})"
        )

    diagonal_defect = None
    if K.spec.variant == PreconditionerVariant.EXACT_SHIFT_INVERT and K.sigma < oracle.eigenvalue(i):
        expected = 1.0 / (oracle.eigenvalues[i - 1 :] - K.sigma)
        off_diagonal = K_tilde - np.diag(np.diag(K_tilde))
        diagonal_defect = max(
            float(np.linalg.norm(off_diagonal, "fro")),
            float(np.max(np.abs(np.diag(K_tilde) - expected))),
        ) / float(np.max(np.abs(expected)))
        if diagonal_defect > DIAGONALITY_TOLERANCE:
            logger.warning(f"Exact shift-invert K~ deviates from diagonal by {diagonal_defect:.3e}")

    return RestrictedOperators(
        i=i,
        nu=nu,
        V=V,
        shifted=oracle.eigenvalues[i - 1 :] - nu,
        K_tilde=K_tilde,
        asymmetry=asymmetry,
        definite=definite,
        smallest_eigenvalue=smallest,
        diagonal_defect=diagonal_defect,
    )


class QualityReport(BaseModel):
    """
    Extremal eigenvalues alpha <= beta of K~ Lambda_nu, the quality parameter
    epsilon = (beta - alpha) / (beta + alpha) and the scaling omega = 2 / (beta + alpha).
    """

    alpha: float
    beta: float
    epsilon: float
    omega: float
    definite: bool = True
    i: Optional[int] = None
    nu: Optional[float] = None


def quality_epsilon(ro: RestrictedOperators) -> QualityReport:
    """
    Quality parameter from the spectrum of Lambda_nu^1/2 K~ Lambda_nu^1/2, which
    is similar to K~ Lambda_nu.
    :param ro: restricted operators of an effectively positive definite K.
    :return: quality report.
    """
    if not ro.definite:
        raise IndefinitePreconditionerError(ro.smallest_eigenvalue)
    half = np.sqrt(ro.shifted)
    product = half[:, None] * ro.symmetric_part * half[None, :]
    values = scipy.linalg.eigvalsh(0.5 * (product + product.T))
    alpha, beta = float(values[0]), float(values[-1])
    if alpha <= 0.0:
        raise IndefinitePreconditionerError(alpha)
    return QualityReport(
        alpha=alpha,
        beta=beta,
        epsilon=(beta - alpha) / (beta + alpha),
        omega=2.0 / (beta + alpha),
        i=ro.i,
        nu=ro.nu,
    )


class DensePreconditioner(Preconditioner):
    """
    Preconditioner given by an explicit dense symmetric matrix.
    """

    matrix: np.ndarray

    @property
    def label(self) -> str:
        return "dense"

    @staticmethod
    def from_matrix(matrix, pencil: Pencil, sigma: float = 0.0) -> DensePreconditioner:
        spec = PreconditionerSpec(variant=PreconditionerVariant.IDENTITY, shift=sigma)
        return DensePreconditioner(
            spec=spec, pencil=pencil, matrix=np.asarray(matrix, dtype=np.float64)
        )

    @staticmethod
    def from_spectrum(
        oracle: SpectralOracle, pencil: Pencil, weights, sigma: float = 0.0
    ) -> DensePreconditioner:
        """
        K = Phi diag(weights) Phi^T, so that K~ is diagonal with the weights of
        the restricted eigenvectors.
        """
        weights = np.asarray(weights, dtype=np.float64)
        matrix = (oracle.vectors * weights[None, :]) @ oracle.vectors.T
        return DensePreconditioner.from_matrix(matrix, pencil, sigma)

    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        return PreconditionedBlock(block=self.matrix @ self._as_block(R))


def step_quality(
    oracle: SpectralOracle, p: Pencil, i: int, nu: float, R: DenseBlock, P: DenseBlock
) -> float:
    """
    Quality of one preconditioned residual block. With X = Lambda_nu^-1 V^T R
    the exact correction and V^T S P the coefficients of P, both measured in the
    Lambda_nu^1/2 geometry as M and N, returns the smallest
    ||(M - omega N) M^+||_2 over omega > 0.
    :param oracle: spectral oracle.
    :param p: pencil.
    :param i: deflation index, 1-based.
    :param nu: parameter below lambda_i.
    :param R: residual block that was preconditioned.
    :param P: preconditioned block.
    :return: block quality, 0 for an exact shift-invert step.
    """
    V = oracle.restricted_basis(i)
    shifted = oracle.eigenvalues[i - 1 :] - nu
    if np.any(shifted <= 0.0):
        raise DomainError(f"nu = {nu} must lie below lambda_{i}")
    R = np.asarray(R, dtype=np.float64).reshape(p.n, -1)
    P = np.asarray(P, dtype=np.float64).reshape(p.n, -1)
    half = np.sqrt(shifted)
    M = (V.T @ R) / half[:, None]
    N = half[:, None] * (V.T @ spmv(p.S, P))
    if not np.any(M):
        return 0.0
    # ||(M - omega N) M^+||_2 = ||Q - omega N R^-1||_2 with M = Q R of full column rank
    Q, upper_factor = scipy.linalg.qr(M, mode="economic")
    diagonal = np.abs(np.diag(upper_factor))
    if np.min(diagonal) > 1e-12 * np.max(diagonal):
        base = Q
        direction = scipy.linalg.solve_triangular(upper_factor.T, N.T, lower=True).T
    else:
        M_plus = scipy.linalg.pinv(M)
        base = M @ M_plus
        direction = N @ M_plus

    def deviation(omega: float) -> float:
        return float(np.linalg.norm(base - omega * direction, 2))

    n_square = float(np.sum(N * N))
    if n_square == 0.0:
        return deviation(0.0)
    omega0 = float(np.sum(M * N)) / n_square
    upper = 4.0 * abs(omega0)
    result = scipy.optimize.minimize_scalar(
        deviation, bounds=(0.0, upper), method="bounded", options={"xatol": 1e-12 * upper}
    )
    best = float(result.fun)
    if omega0 > 0.0:
        best = min(best, deviation(omega0))
    return best


class QualityRecorder:
    """
    Step hook for solver runs computing the block quality of every step with
    nu equal to the shift of the step. Steps whose shift is not below lambda_i
    get no quality.
    """

    def __init__(self, oracle: SpectralOracle, p: Pencil):
        oracle.check_fingerprint(p.fingerprint())
        self.oracle = oracle
        self.pencil = p
        self.values = []

    def __call__(self, defl, K, state, R, P) -> Optional[float]:
        i = defl.i
        if K.sigma >= self.oracle.eigenvalue(i):
            self.values.append(None)
            return None
        epsilon = step_quality(self.oracle, self.pencil, i, K.sigma, R, P)
        self.values.append(epsilon)
        return epsilon


def assess_trace_quality(
    trace, oracle: SpectralOracle, p: Pencil, spec: PreconditionerSpec
) -> Dict[Tuple[int, float], Optional[QualityReport]]:
    """
    Quality report of the preconditioner rebuilt for every distinct (run,
    shift) of a trace, with nu equal to the shift. Shifts not below lambda_i
    and preconditioners that are not effectively positive definite map to None.
    :param trace: solver trace.
    :param oracle: spectral oracle of the traced pencil.
    :param p: traced pencil.
    :param spec: preconditioner recipe the trace was produced with.
    :return: quality per (run, sigma).
    """
    oracle.check_fingerprint(trace.fingerprint)
    reports: Dict[Tuple[int, float], Optional[QualityReport]] = {}
    for record in trace.records:
        key = (record.run, record.sigma)
        if key in reports:
            continue
        if record.sigma >= oracle.eigenvalue(record.i):
            reports[key] = None
            continue
        K = Preconditioner.build(spec.with_shift(record.sigma), p)
        ro = effective_form(K, oracle, record.i, record.sigma)
        reports[key] = quality_epsilon(ro) if ro.definite else None
        if reports[key] is not None:
            logger.info(
                f"Run {record.run}, sigma = {record.sigma}: epsilon = {reports[key].epsilon:.3e}"
            )
    return reports


def coefficient_step(ro: RestrictedOperators, C) -> RitzSet:
    """
    One block step of the restricted formulation in coefficient space: the
    Ritz pairs of Lambda in span{C, K~ R~} with R~ = Lambda C - C Theta, keeping
    as many pairs as C has columns.
    :param ro: restricted operators.
    :param C: orthonormal coefficient block, typically V^T S Z.
    :return: Ritz pairs with orthonormal coefficient vectors.
    """
    C = np.asarray(C, dtype=np.float64).reshape(len(ro.shifted), -1)
    lambdas = ro.eigenvalues
    theta = np.sum(C * (lambdas[:, None] * C), axis=0) / np.sum(C * C, axis=0)
    residual = lambdas[:, None] * C - C * theta[None, :]
    basis = np.hstack([C, ro.K_tilde @ residual])
    Q, diagonal, _ = scipy.linalg.qr(basis, mode="economic", pivoting=True)
    magnitudes = np.abs(np.diag(diagonal))
    rank = int(np.sum(magnitudes > 1e-10 * magnitudes[0])) if magnitudes.size else 0
    Q = Q[:, :rank]
    projected = Q.T @ (lambdas[:, None] * Q)
    values, W = dense_sym_eig(0.5 * (projected + projected.T))
    k = min(C.shape[1], rank)
    if k == 0:
        return RitzSet(values=np.empty(0), vectors=np.empty((len(lambdas), 0)), subspace_dim=0)
    return RitzSet(values=values[:k], vectors=Q @ W[:, :k], subspace_dim=rank)
