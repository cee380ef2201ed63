"""
Sparse and small dense linear algebra kernels: products and norms in the
S-geometry, block S-orthonormalisation, the dense symmetric eigensolver and the
Rayleigh-Ritz procedure.
"""

from __future__ import annotations

import hashlib
import math
from functools import cached_property
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import scipy.linalg
import scipy.sparse
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from pydantic_core import PydanticCustomError
from scipy.sparse.linalg import cg

from psdid.exceptions import (
    DenseLimitError,
    DimensionMismatchError,
    EmptyBasisError,
    InnerSolveError,
    JacobiSweepError,
    NotPositiveDefiniteError,
    NotSymmetricError,
    RankCollapseError,
    ZeroVectorError,
)
from psdid.logger import logger

DROPTOL = 1e-10
DENSE_LIMIT = 4000
JACOBI_LIMIT = 32
JACOBI_MAX_SWEEPS = 50
JACOBI_TOLERANCE = 1e-14
SYMMETRY_TOLERANCE = 1e-12

# Columns are vectors of length n, a block is an (n, k) float array.
DenseBlock = np.ndarray


class SparseMatrix(BaseModel):
    """
    Square sparse matrix stored in compressed sparse row format, with sorted
    and duplicate free column indices in each row.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    matrix: scipy.sparse.csr_matrix
    symmetric: bool = False

    @field_validator("matrix", mode="before")
    @classmethod
    def canonical_csr(cls, value) -> scipy.sparse.csr_matrix:
        """
        Convert any sparse or dense input to a canonical float64 csr matrix.
        :param value: matrix-like input.
        :return: canonical csr matrix.
        """
        if not scipy.sparse.issparse(value):
            value = np.asarray(value, dtype=np.float64)
        matrix = scipy.sparse.csr_matrix(value, dtype=np.float64).copy()
        if matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
            raise PydanticCustomError(
                "not_square",
                "Sparse matrix must be square with n >= 1, got shape {shape}",
                {"shape": matrix.shape},
            )
        matrix.sum_duplicates()
        matrix.sort_indices()
        return matrix

    @model_validator(mode="after")
    def symmetric_pattern(self) -> SparseMatrix:
        if self.symmetric:
            pattern = self.matrix.copy()
            pattern.data[:] = 1.0
            if (pattern != pattern.T).nnz != 0:
                raise PydanticCustomError(
                    "not_structurally_symmetric",
                    "Matrix flagged symmetric has a non symmetric pattern",
                )
        return self

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self.matrix.nnz

    @cached_property
    def is_identity(self) -> bool:
        """
        True when the stored matrix is exactly the identity.
        """
        matrix = self.matrix
        return bool(
            matrix.nnz == self.n
            and np.array_equal(matrix.indices, np.arange(self.n))
            and np.all(matrix.data == 1.0)
        )

    def fingerprint(self) -> str:
        """
        Hash of the stored pattern and values.
        :return: hexadecimal sha256 digest.
        """
        digest = hashlib.sha256()
        digest.update(np.int64(self.n).tobytes())
        digest.update(self.matrix.indptr.astype(np.int64).tobytes())
        digest.update(self.matrix.indices.astype(np.int64).tobytes())
        digest.update(self.matrix.data.astype(np.float64).tobytes())
        return digest.hexdigest()

    def toarray(self) -> np.ndarray:
        return self.matrix.toarray()

    def __matmul__(self, x):
        return spmv(self, x)

    @staticmethod
    def identity(n: int) -> SparseMatrix:
        return SparseMatrix(
            matrix=scipy.sparse.identity(n, dtype=np.float64, format="csr"),
            symmetric=True,
        )

    @staticmethod
    def from_dense(matrix, symmetric: Optional[bool] = None) -> SparseMatrix:
        """
        Build a sparse matrix from a dense array, keeping its nonzeros only.
        :param matrix: dense square array.
        :param symmetric: symmetry flag, detected from values when None.
        :return: constructed sparse matrix.
        """
        matrix = np.asarray(matrix, dtype=np.float64)
        if symmetric is None:
            symmetric = bool(
                matrix.shape[0] == matrix.shape[1] and np.array_equal(matrix, matrix.T)
            )
        return SparseMatrix(matrix=scipy.sparse.csr_matrix(matrix), symmetric=symmetric)


class Pencil(BaseModel):
    """
    Symmetric definite pencil (H, S): H symmetric, S symmetric positive definite.
    Positive definiteness of S is checked lazily by the S-norm computations.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    H: SparseMatrix
    S: SparseMatrix

    @model_validator(mode="after")
    def same_dimension(self) -> Pencil:
        if self.H.n != self.S.n:
            raise PydanticCustomError(
                "dimension_mismatch",
                "H and S must have the same dimension, got {h} and {s}",
                {"h": self.H.n, "s": self.S.n},
            )
        return self

    @property
    def n(self) -> int:
        return self.H.n

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.H.fingerprint().encode())
        digest.update(self.S.fingerprint().encode())
        return digest.hexdigest()

    @staticmethod
    def from_dense(H, S=None) -> Pencil:
        H = np.asarray(H, dtype=np.float64)
        S_matrix = (
            SparseMatrix.identity(H.shape[0])
            if S is None
            else SparseMatrix.from_dense(S, symmetric=True)
        )
        return Pencil(H=SparseMatrix.from_dense(H, symmetric=True), S=S_matrix)


class InnerSolveConfig(BaseModel):
    """
    Settings of the inner solve S y = r used by the S^-1 norm.
    """

    tol: float = 1e-12
    max_iterations: int = 10000

    @field_validator("tol")
    @classmethod
    def tol_in_unit_interval(cls, tol: float) -> float:
        if not 0.0 < tol < 1.0:
            raise PydanticCustomError(
                "tolerance_range", "Tolerance must lie in (0, 1), got {tol}", {"tol": tol}
            )
        return tol


class RitzSet(BaseModel):
    """
    Ritz pairs extracted from a trial subspace.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    values: np.ndarray
    vectors: np.ndarray
    subspace_dim: int

    @model_validator(mode="after")
    def consistent(self) -> RitzSet:
        if self.vectors.ndim != 2 or self.vectors.shape[1] != len(self.values):
            raise PydanticCustomError(
                "ritz_count", "As many Ritz vectors as Ritz values are required"
            )
        if np.any(np.diff(self.values) < 0.0):
            raise PydanticCustomError("ritz_order", "Ritz values must be ascending")
        return self


def _check_length(A: SparseMatrix, x: np.ndarray, what: str = "vector"):
    if x.shape[0] != A.n:
        raise DimensionMismatchError(A.n, x.shape[0], what)


def _as_block(B) -> np.ndarray:
    B = np.asarray(B, dtype=np.float64)
    if B.ndim == 1:
        B = B[:, None]
    return B


def spmv(A: SparseMatrix, x) -> np.ndarray:
    """
    Sparse matrix product with a vector or a block, summed row by row over the
    stored nonzeros in ascending column order.
    :param A: sparse matrix.
    :param x: vector of length n, or (n, k) block.
    :return: A x.
    """
    x = np.asarray(x, dtype=np.float64)
    _check_length(A, x)
    return A.matrix @ x


def s_inner(S: SparseMatrix, x, y) -> float:
    """
    S-inner product x^T S y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_length(S, x)
    _check_length(S, y)
    return float(x @ spmv(S, y))


def s_norm(S: SparseMatrix, x) -> float:
    value = s_inner(S, x, x)
    if value < 0.0:
        raise NotPositiveDefiniteError(f"Negative S-norm square {value}")
    return math.sqrt(value)


def s_inv_norm(S: SparseMatrix, r, solver_cfg: Optional[InnerSolveConfig] = None) -> float:
    """
    Norm sqrt(r^T S^-1 r). The inner system S y = r is solved with a Jacobi
    preconditioned conjugate gradient, except when S is the identity.
    :param S: symmetric positive definite matrix.
    :param r: residual vector.
    :param solver_cfg: inner solve settings.
    :return: the S^-1 norm of r.
    """
    cfg = solver_cfg or InnerSolveConfig()
    r = np.asarray(r, dtype=np.float64)
    _check_length(S, r)
    r_norm = float(np.linalg.norm(r))
    if S.is_identity or r_norm == 0.0:
        return r_norm

    diagonal = S.matrix.diagonal()
    if np.any(diagonal <= 0.0):
        raise NotPositiveDefiniteError("S has a non positive diagonal entry")
    y, info = cg(
        S.matrix,
        r,
        rtol=cfg.tol,
        atol=0.0,
        maxiter=cfg.max_iterations,
        M=scipy.sparse.diags(1.0 / diagonal),
    )
    achieved = float(np.linalg.norm(r - S.matrix @ y)) / r_norm
    if info != 0 and achieved > cfg.tol:
        raise InnerSolveError(achieved, cfg.tol, cfg.max_iterations)
    value = float(r @ y)
    if value <= 0.0:
        raise NotPositiveDefiniteError(f"Non positive S^-1 norm square {value}")
    return math.sqrt(value)


def s_inv_norms(
    S: SparseMatrix, R, solver_cfg: Optional[InnerSolveConfig] = None
) -> np.ndarray:
    """
    Column-wise S^-1 norms of a block.
    """
    R = _as_block(R)
    if S.is_identity:
        _check_length(S, R, "block")
        return np.linalg.norm(R, axis=0)
    return np.array([s_inv_norm(S, R[:, j], solver_cfg) for j in range(R.shape[1])])


def s_orthonormalize(
    S: SparseMatrix,
    B,
    against: Optional[DenseBlock] = None,
    droptol: float = DROPTOL,
) -> DenseBlock:
    """
    Block Gram-Schmidt in the S-inner product, with one unconditional
    reorthogonalisation pass. Columns whose S-norm after projection falls below
    droptol times their original S-norm are dropped.
    :param S: symmetric positive definite matrix.
    :param B: (n, k) block to orthonormalise.
    :param against: S-orthonormal block the result must be S-orthogonal to.
    :param droptol: relative rank reveal threshold.
    :return: S-orthonormal block spanning, together with against, the same
    space as [against, B].
    """
    B = _as_block(B)
    _check_length(S, B, "block")
    n, k = B.shape
    if against is not None and against.shape[1] > 0:
        against = _as_block(against)
        s_against = spmv(S, against)
    else:
        against = None
        s_against = None

    Q = np.empty((n, k))
    SQ = np.empty((n, k))
    kept = 0
    for j in range(k):
        v = B[:, j].copy()
        original = math.sqrt(max(float(v @ spmv(S, v)), 0.0))
        if original == 0.0:
            logger.debug(f"Column {j} is zero and is dropped")
            continue
        for _ in range(2):
            if s_against is not None:
                v -= against @ (s_against.T @ v)
            if kept:
                v -= Q[:, :kept] @ (SQ[:, :kept].T @ v)
        sv = spmv(S, v)
        norm = math.sqrt(max(float(v @ sv), 0.0))
        if norm <= droptol * original:
            logger.debug(
                f"Column {j} dropped by rank reveal ({norm:.3e} <= {droptol:.1e} x {original:.3e})"
            )
            continue
        Q[:, kept] = v / norm
        SQ[:, kept] = sv / norm
        kept += 1

    if kept == 0:
        raise EmptyBasisError("Every column was dropped during S-orthonormalisation")
    return Q[:, :kept].copy()


def _off_diagonal_mass(a: np.ndarray) -> float:
    # strict upper triangle only, doubled
    return math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))


def _cyclic_jacobi(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = A.copy()
    m = a.shape[0]
    v = np.eye(m)
    target = JACOBI_TOLERANCE * float(np.linalg.norm(a, "fro"))
    for _ in range(JACOBI_MAX_SWEEPS):
        if _off_diagonal_mass(a) <= target:
            break
        for p in range(m - 1):
            for q in range(p + 1, m):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c

                col_p = a[:, p].copy()
                col_q = a[:, q].copy()
                a[:, p] = c * col_p - s * col_q
                a[:, q] = s * col_p + c * col_q
                row_p = a[p, :].copy()
                row_q = a[q, :].copy()
                a[p, :] = c * row_p - s * row_q
                a[q, :] = s * row_p + c * row_q
                a[p, q] = a[q, p] = 0.0

                vec_p = v[:, p].copy()
                vec_q = v[:, q].copy()
                v[:, p] = c * vec_p - s * vec_q
                v[:, q] = s * vec_p + c * vec_q
    else:
        off = _off_diagonal_mass(a)
        if off > target:
            raise JacobiSweepError(JACOBI_MAX_SWEEPS, off)
    return np.diag(a).copy(), v


def dense_sym_eig(
    A,
    dense_limit: int = DENSE_LIMIT,
    jacobi_limit: int = JACOBI_LIMIT,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Eigen-decomposition of a dense symmetric matrix. Matrices up to jacobi_limit
    rows are diagonalised by cyclic Jacobi sweeps, larger ones by LAPACK.
    :param A: symmetric matrix, within a relative tolerance of 1e-12.
    :param dense_limit: largest accepted size.
    :param jacobi_limit: largest size handled by the Jacobi sweeps.
    :return: ascending eigenvalues and orthonormal eigenvectors (columns).
    """
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DimensionMismatchError(A.shape[0], A.shape[-1], "square matrix")
    m = A.shape[0]
    if m > dense_limit:
        raise DenseLimitError(m, dense_limit)
    if m == 0:
        return np.empty(0), np.empty((0, 0))

    frobenius = float(np.linalg.norm(A, "fro"))
    asymmetry = float(np.linalg.norm(A - A.T, "fro"))
    if asymmetry > SYMMETRY_TOLERANCE * frobenius:
        raise NotSymmetricError(asymmetry / frobenius)
    A = 0.5 * (A + A.T)

    if m <= jacobi_limit:
        values, vectors = _cyclic_jacobi(A)
    else:
        values, vectors = scipy.linalg.eigh(A)
    order = np.argsort(values, kind="stable")
    return values[order], vectors[:, order]


def rayleigh_quotient(p: Pencil, z) -> float:
    """
    Rayleigh quotient z^T H z / z^T S z.
    """
    z = np.asarray(z, dtype=np.float64)
    _check_length(p.S, z)
    if not np.any(z):
        raise ZeroVectorError("Rayleigh quotient of the zero vector")
    denominator = float(z @ spmv(p.S, z))
    if denominator <= 0.0:
        raise NotPositiveDefiniteError(f"Non positive S-norm square {denominator}")
    return float(z @ spmv(p.H, z)) / denominator


def rayleigh_ritz(
    p: Pencil,
    basis,
    select: Union[range, Sequence[int]],
    against: Optional[DenseBlock] = None,
    droptol: float = DROPTOL,
    dense_limit: int = DENSE_LIMIT,
) -> RitzSet:
    """
    Rayleigh-Ritz procedure: S-orthonormalise the basis (S-orthogonally to
    against when given), diagonalise the projected matrix and return the
    selected Ritz pairs, ranked from the smallest Ritz value.
    :param p: pencil.
    :param basis: (n, k) trial basis.
    :param select: ranks of the Ritz pairs to return.
    :param against: S-orthonormal block projected out of the trial basis.
    :param droptol: rank reveal threshold of the orthonormalisation.
    :param dense_limit: largest projected size.
    :return: selected Ritz pairs with S-normalised vectors.
    """
    Q = s_orthonormalize(p.S, basis, against, droptol)
    ranks = np.asarray(list(select), dtype=int)
    if ranks.size == 0:
        raise RankCollapseError(Q.shape[1], 0)
    if ranks.max() >= Q.shape[1]:
        raise RankCollapseError(Q.shape[1], int(ranks.max()) + 1)

    projected = Q.T @ spmv(p.H, Q)
    projected = 0.5 * (projected + projected.T)
    values, W = dense_sym_eig(projected, dense_limit)
    vectors = Q @ W[:, ranks]
    s_norms = np.sqrt(np.sum(vectors * spmv(p.S, vectors), axis=0))
    vectors = vectors / s_norms
    return RitzSet(values=values[ranks], vectors=vectors, subspace_dim=Q.shape[1])
