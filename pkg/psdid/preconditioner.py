"""
Preconditioners K ~ (H - sigma S)^-1. Each variant is a Preconditioner subclass
registered under its variant name, and built from a PreconditionerSpec.
"""

from __future__ import annotations

import math
from enum import Enum
from typing import Dict, List, Optional, Type

import numpy as np
import scipy.linalg.lapack
import scipy.sparse
from pydantic import BaseModel, ConfigDict, Field, field_validator
from pydantic_core import PydanticCustomError

from psdid.exceptions import (
    BandwidthError,
    DimensionMismatchError,
    InnerSolveError,
    SingularShiftError,
)
from psdid.linalg import DenseBlock, Pencil, SparseMatrix, spmv
from psdid.logger import logger
from psdid.minres import MinresResult, minres


class PreconditionerVariant(str, Enum):
    IDENTITY = "identity"
    DIAGONAL = "diagonal"
    EXACT_SHIFT_INVERT = "exact_shift_invert"
    INNER_KRYLOV = "inner_krylov"
    PROJECTED_INNER_KRYLOV = "projected_inner_krylov"


class InnerPreconditionerKind(str, Enum):
    DIAGONAL = "diagonal"


KRYLOV_VARIANTS = (
    PreconditionerVariant.INNER_KRYLOV,
    PreconditionerVariant.PROJECTED_INNER_KRYLOV,
)


class PreconditionerSpec(BaseModel):
    """
    Recipe of a preconditioner. The tolerance and the iteration budget are only
    used by the Krylov variants, the bandwidth cap by the exact variant.
    """

    model_config = ConfigDict(extra="forbid")

    variant: PreconditionerVariant = PreconditionerVariant.EXACT_SHIFT_INVERT
    shift: float = 0.0
    tolerance: float = 0.1
    max_iterations: int = Field(default=1000, ge=1)
    inner_preconditioner: Optional[InnerPreconditionerKind] = None
    bandwidth_cap: int = Field(default=2000, ge=0)

    @field_validator("tolerance")
    @classmethod
    def tolerance_in_unit_interval(cls, tolerance: float) -> float:
        if not 0.0 < tolerance < 1.0:
            raise PydanticCustomError(
                "tolerance_range",
                "Inner tolerance must lie in (0, 1), got {tolerance}",
                {"tolerance": tolerance},
            )
        return tolerance

    @field_validator("shift")
    @classmethod
    def finite_shift(cls, shift: float) -> float:
        if not math.isfinite(shift):
            raise PydanticCustomError("shift_not_finite", "Shift must be finite")
        return shift

    def with_shift(self, shift: float, tolerance: Optional[float] = None) -> PreconditionerSpec:
        """
        Copy of the recipe with another shift, and optionally another inner
        tolerance.
        """
        update = {"shift": shift}
        if tolerance is not None:
            update["tolerance"] = min(max(tolerance, 1e-15), 1.0 - 1e-15)
        return PreconditionerSpec.model_validate(self.model_dump() | update)


class InnerSolveReport(BaseModel):
    """
    Achieved relative residuals of the inner solves of one block application.
    """

    relative_residuals: List[float] = []
    iterations: List[int] = []
    warning: bool = False

    @property
    def max_residual(self) -> float:
        return max(self.relative_residuals, default=0.0)


class PreconditionedBlock(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    block: np.ndarray
    report: InnerSolveReport = Field(default_factory=InnerSolveReport)


class BandFactorization(BaseModel):
    """
    LU factorisation with partial pivoting of a banded matrix, in LAPACK band
    storage of 3 * bandwidth + 1 rows.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    bandwidth: int
    lu: np.ndarray
    pivots: np.ndarray
    sigma: float = 0.0

    @property
    def n(self) -> int:
        return self.lu.shape[1]

    @staticmethod
    def factorize(
        matrix: scipy.sparse.csr_matrix, bandwidth: int, sigma: float = 0.0
    ) -> BandFactorization:
        """
        Factorise a banded sparse matrix.
        :param matrix: square matrix whose nonzeros lie within the bandwidth.
        :param bandwidth: number of sub and super diagonals.
        :param sigma: shift the matrix was built with, reported on failure.
        :return: band factorisation.
        """
        n = matrix.shape[0]
        coo = matrix.tocoo()
        band = np.zeros((3 * bandwidth + 1, n), order="F")
        band[2 * bandwidth + coo.row - coo.col, coo.col] = coo.data
        lu, pivots, info = scipy.linalg.lapack.dgbtrf(band, bandwidth, bandwidth)
        if info > 0:
            raise SingularShiftError(sigma, info - 1)
        if info < 0:
            raise ValueError(f"Illegal argument {-info} in banded LU factorization")
        return BandFactorization(bandwidth=bandwidth, lu=lu, pivots=pivots, sigma=sigma)

    def solve(self, rhs) -> np.ndarray:
        """
        Solve A X = rhs with the stored factors.
        :param rhs: vector or block.
        :return: solution of the same shape.
        """
        rhs = np.asarray(rhs, dtype=np.float64)
        if rhs.shape[0] != self.n:
            raise DimensionMismatchError(self.n, rhs.shape[0], "right-hand side")
        block = np.asfortranarray(rhs.reshape(self.n, -1))
        x, info = scipy.linalg.lapack.dgbtrs(
            self.lu, self.bandwidth, self.bandwidth, block, self.pivots
        )
        if info != 0 or not np.all(np.isfinite(x)):
            raise SingularShiftError(self.sigma, -1)
        return x.reshape(rhs.shape)


def band_width(A: SparseMatrix) -> int:
    """
    Largest distance |row - col| over the stored nonzeros.
    """
    coo = A.matrix.tocoo()
    if coo.nnz == 0:
        return 0
    return int(np.max(np.abs(coo.row.astype(np.int64) - coo.col.astype(np.int64))))


def shifted_matrix(p: Pencil, sigma: float) -> scipy.sparse.csr_matrix:
    shifted = (p.H.matrix - sigma * p.S.matrix).tocsr()
    shifted.sort_indices()
    return shifted


PRECONDITIONERS: Dict[str, Type["Preconditioner"]] = {}


def register_preconditioner(variant: PreconditionerVariant):
    """
    This decorator registers a new Preconditioner class in PRECONDITIONERS registry.
    :param variant: variant realised by the class.
    :return: the registered Preconditioner class.
    """

    def decorator(decorated_class):
        if variant.value not in PRECONDITIONERS:
            PRECONDITIONERS[variant.value] = decorated_class
        return decorated_class

    return decorator


def get_preconditioner(variant: PreconditionerVariant) -> Type["Preconditioner"]:
    """
    Get a registered Preconditioner class by variant.
    :param variant: variant of the desired preconditioner.
    :return: registered Preconditioner class.
    """
    return PRECONDITIONERS[PreconditionerVariant(variant).value]


def registered_preconditioners() -> List[str]:
    return list(PRECONDITIONERS.keys())


class Preconditioner(BaseModel):
    """
    Realised operator r -> K r for a pencil and a shift. Instances are immutable
    once built.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    spec: PreconditionerSpec
    pencil: Pencil

    @property
    def sigma(self) -> float:
        return self.spec.shift

    @property
    def label(self) -> str:
        return self.spec.variant.value

    @classmethod
    def realize(cls, spec: PreconditionerSpec, pencil: Pencil) -> Preconditioner:
        return cls(spec=spec, pencil=pencil)

    @staticmethod
    def build(spec: PreconditionerSpec, pencil: Pencil) -> Preconditioner:
        """
        Build the preconditioner described by spec. Factorisations happen now,
        Krylov variants only keep their settings.
        :param spec: preconditioner recipe.
        :param pencil: pencil the operator refers to.
        :return: ready to apply preconditioner.
        """
        preconditioner_class = get_preconditioner(spec.variant)
        logger.debug(f"Building {spec.variant.value} preconditioner with shift {spec.shift}")
        return preconditioner_class.realize(spec, pencil)

    def solve(
        self,
        R,
        deflation_basis: Optional[DenseBlock] = None,
        block: Optional[DenseBlock] = None,
    ) -> PreconditionedBlock:
        """
        Apply the operator to every column of R.
        :param R: (n, k) residual block.
        :param deflation_basis: accepted eigenvectors U, used by projected variants.
        :param block: current iterate block Z, used by projected variants.
        :return: preconditioned block with the inner solve report.
        """
        raise NotImplementedError()

    def apply(self, R) -> np.ndarray:
        return self.solve(R).block

    def _as_block(self, R) -> np.ndarray:
        R = np.asarray(R, dtype=np.float64)
        if R.shape[0] != self.pencil.n:
            raise DimensionMismatchError(self.pencil.n, R.shape[0], "block")
        return R.reshape(self.pencil.n, -1)


@register_preconditioner(PreconditionerVariant.IDENTITY)
class IdentityPreconditioner(Preconditioner):
    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        return PreconditionedBlock(block=self._as_block(R).copy())


@register_preconditioner(PreconditionerVariant.DIAGONAL)
class DiagonalPreconditioner(Preconditioner):
    """
    Inverse of the diagonal of H - sigma S.
    """

    inverse_diagonal: np.ndarray

    @classmethod
    def realize(cls, spec: PreconditionerSpec, pencil: Pencil) -> DiagonalPreconditioner:
        diagonal = pencil.H.matrix.diagonal() - spec.shift * pencil.S.matrix.diagonal()
        zeros = np.flatnonzero(diagonal == 0.0)
        if zeros.size:
            raise SingularShiftError(spec.shift, int(zeros[0]))
        return cls(spec=spec, pencil=pencil, inverse_diagonal=1.0 / diagonal)

    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        return PreconditionedBlock(block=self._as_block(R) * self.inverse_diagonal[:, None])


@register_preconditioner(PreconditionerVariant.EXACT_SHIFT_INVERT)
class ExactShiftInvertPreconditioner(Preconditioner):
    """
    K = (H - sigma S)^-1 through a banded LU factorisation.
    """

    factorization: BandFactorization

    @classmethod
    def realize(
        cls, spec: PreconditionerSpec, pencil: Pencil
    ) -> ExactShiftInvertPreconditioner:
        shifted = SparseMatrix(matrix=shifted_matrix(pencil, spec.shift))
        bandwidth = band_width(shifted)
        if bandwidth > spec.bandwidth_cap:
            raise BandwidthError(bandwidth, spec.bandwidth_cap)
        factorization = BandFactorization.factorize(shifted.matrix, bandwidth, spec.shift)
        logger.debug(f"Banded LU of H - {spec.shift} S done (bandwidth {bandwidth})")
        return cls(spec=spec, pencil=pencil, factorization=factorization)

    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        return PreconditionedBlock(block=self.factorization.solve(self._as_block(R)))


def _diagonal_inner_preconditioner(p: Pencil, sigma: float):
    diagonal = np.abs(p.H.matrix.diagonal() - sigma * p.S.matrix.diagonal())
    diagonal[diagonal == 0.0] = 1.0
    inverse = 1.0 / diagonal
    return lambda v: inverse * v


@register_preconditioner(PreconditionerVariant.INNER_KRYLOV)
class InnerKrylovPreconditioner(Preconditioner):
    """
    K r is the minimum residual approximation of (H - sigma S)^-1 r at the
    relative tolerance of the spec.
    """

    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        R = self._as_block(R)
        shifted = shifted_matrix(self.pencil, self.sigma)
        inner = (
            _diagonal_inner_preconditioner(self.pencil, self.sigma)
            if self.spec.inner_preconditioner == InnerPreconditionerKind.DIAGONAL
            else None
        )
        P = np.empty_like(R)
        report = InnerSolveReport()
        for j in range(R.shape[1]):
            result = minres(
                lambda v: shifted @ v,
                R[:, j],
                self.spec.tolerance,
                self.spec.max_iterations,
                inner,
            )
            P[:, j] = result.x
            _record(report, result, self.spec)
        return PreconditionedBlock(block=P, report=report)


@register_preconditioner(PreconditionerVariant.PROJECTED_INNER_KRYLOV)
class ProjectedInnerKrylovPreconditioner(Preconditioner):
    """
    K r solves the restriction of (H - sigma S) to the S-orthogonal complement
    of span{U, Z}, so that K r is S-orthogonal to U and to the current block.
    """

    def solve(self, R, deflation_basis=None, block=None) -> PreconditionedBlock:
        if block is None:
            raise ValueError("The projected preconditioner needs the current block")
        R = self._as_block(R)
        block = np.asarray(block, dtype=np.float64).reshape(self.pencil.n, -1)
        if deflation_basis is not None and deflation_basis.shape[1] > 0:
            basis = np.hstack([deflation_basis, block])
        else:
            basis = block
        P = np.empty_like(R)
        report = InnerSolveReport()
        for j in range(R.shape[1]):
            p, result = _projected_minres(
                self.pencil,
                basis,
                self.sigma,
                R[:, j],
                self.spec.tolerance,
                self.spec.max_iterations,
            )
            P[:, j] = p
            _record(report, result, self.spec)
        return PreconditionedBlock(block=P, report=report)


def _record(report: InnerSolveReport, result: MinresResult, spec: PreconditionerSpec):
    report.relative_residuals.append(result.relative_residual)
    report.iterations.append(result.iterations)
    if not result.converged:
        report.warning = True
        logger.warning(
            f"Inner {spec.variant.value} solve hit {spec.max_iterations} iterations "
            f"with relative residual {result.relative_residual:.3e} > {spec.tolerance:.1e}"
        )


def _projected_minres(
    p: Pencil,
    basis: np.ndarray,
    sigma: float,
    r: np.ndarray,
    tol: float,
    max_iterations: int,
):
    s_basis = spmv(p.S, basis)

    def project(v):
        # S-orthogonal projection onto the complement of span{basis}
        return v - basis @ (s_basis.T @ v)

    def project_transposed(v):
        return v - s_basis @ (basis.T @ v)

    def operator(v):
        w = project(v)
        return project_transposed(spmv(p.H, w) - sigma * spmv(p.S, w))

    n = r.shape[0]
    r_norm = float(np.linalg.norm(r))
    b = project_transposed(r)
    b_norm = float(np.linalg.norm(b))
    if r_norm == 0.0 or b_norm == 0.0:
        return np.zeros(n), MinresResult(
            x=np.zeros(n), relative_residual=0.0, iterations=0, converged=True
        )

    result = minres(operator, b, tol * r_norm / b_norm, max_iterations)
    x = project(project(result.x))
    relative_residual = result.relative_residual * b_norm / r_norm
    return x, MinresResult(
        x=x,
        relative_residual=relative_residual,
        iterations=result.iterations,
        converged=relative_residual <= tol,
    )


def projected_solve(
    p: Pencil,
    U: Optional[DenseBlock],
    z,
    sigma: float,
    r,
    tol: float,
    max_iterations: int = 1000,
) -> np.ndarray:
    """
    Solve the restricted system (I - S Pi)(H - sigma S)(I - Pi) p = r where Pi is
    the S-orthogonal projector onto span{U, z}.
    :param p: pencil.
    :param U: S-orthonormal accepted eigenvectors, or None.
    :param z: S-normalised current iterate, S-orthogonal to U.
    :param sigma: shift.
    :param r: right-hand side, usually the residual of z.
    :param tol: projected residual tolerance, relative to ||r||_2.
    :param max_iterations: iteration budget.
    :return: p, S-orthogonal to U and z.
    """
    z = np.asarray(z, dtype=np.float64).reshape(-1, 1)
    basis = z if U is None or U.shape[1] == 0 else np.hstack([U, z])
    r = np.asarray(r, dtype=np.float64)
    x, result = _projected_minres(p, basis, sigma, r, tol, max_iterations)
    if not result.converged:
        raise InnerSolveError(result.relative_residual, tol, result.iterations)
    return x


def build(spec: PreconditionerSpec, p: Pencil) -> Preconditioner:
    return Preconditioner.build(spec, p)


def apply(K: Preconditioner, R) -> np.ndarray:
    return K.apply(R)
