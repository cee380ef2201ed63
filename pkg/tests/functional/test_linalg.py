import numpy as np
import pytest
import scipy.sparse
from pydantic import ValidationError

from psdid.exceptions import (
    DenseLimitError,
    DimensionMismatchError,
    EmptyBasisError,
    NotSymmetricError,
    RankCollapseError,
    ZeroVectorError,
)
from psdid.linalg import (
    Pencil,
    SparseMatrix,
    dense_sym_eig,
    rayleigh_quotient,
    rayleigh_ritz,
    s_inv_norm,
    s_norm,
    s_orthonormalize,
    spmv,
)


@pytest.fixture()
def diagonal_pencil():
    return Pencil.from_dense(np.diag(np.arange(1.0, 11.0)))


@pytest.fixture()
def mass_matrix():
    n = 30
    main = np.full(n, 4.0 / 6.0)
    off = np.full(n - 1, 1.0 / 6.0)
    return SparseMatrix(matrix=scipy.sparse.diags([off, main, off], [-1, 0, 1]), symmetric=True)


def test_sparse_matrix_canonical_storage():
    """
    Check that duplicates are summed and column indices sorted in every row.
    """
    coo = scipy.sparse.coo_matrix(
        ([1.0, 2.0, 3.0, 4.0], ([0, 0, 1, 0], [1, 0, 1, 1])), shape=(2, 2)
    )
    A = SparseMatrix(matrix=coo)
    assert A.nnz == 3
    assert A.matrix.has_sorted_indices
    assert A.toarray().tolist() == [[2.0, 5.0], [0.0, 3.0]]


def test_sparse_matrix_invalid():
    """
    Check that non square matrices and matrices flagged symmetric with a non
    symmetric pattern are rejected.
    """
    with pytest.raises(ValidationError):
        SparseMatrix(matrix=np.ones((2, 3)))
    with pytest.raises(ValidationError):
        SparseMatrix(matrix=np.array([[1.0, 1.0], [0.0, 1.0]]), symmetric=True)


def test_identity_detection():
    assert SparseMatrix.identity(5).is_identity
    assert not SparseMatrix.from_dense(2.0 * np.eye(5)).is_identity
    assert SparseMatrix.from_dense(np.eye(3)).symmetric


def test_pencil_dimension_mismatch():
    with pytest.raises(ValidationError):
        Pencil(H=SparseMatrix.identity(3), S=SparseMatrix.identity(4))


def test_fingerprint_depends_on_values(diagonal_pencil):
    other = Pencil.from_dense(np.diag(np.arange(1.0, 11.0) + 1e-15 * np.arange(10)))
    assert diagonal_pencil.fingerprint() == Pencil.from_dense(np.diag(np.arange(1.0, 11.0))).fingerprint()
    assert diagonal_pencil.fingerprint() != other.fingerprint()


def test_spmv_dimension_mismatch(diagonal_pencil):
    with pytest.raises(DimensionMismatchError):
        spmv(diagonal_pencil.H, np.ones(9))
    assert spmv(diagonal_pencil.H, np.ones((10, 2))).shape == (10, 2)


def test_s_inv_norm(mass_matrix):
    """
    Check the S^-1 norm against a dense solve.
    """
    rng = np.random.default_rng(0)
    r = rng.standard_normal(mass_matrix.n)
    expected = np.sqrt(r @ np.linalg.solve(mass_matrix.toarray(), r))
    assert s_inv_norm(mass_matrix, r) == pytest.approx(expected, rel=1e-10)
    assert s_inv_norm(SparseMatrix.identity(4), np.array([3.0, 4.0, 0.0, 0.0])) == 5.0


def test_s_orthonormalize(mass_matrix):
    """
    Check that the block is S-orthonormal, S-orthogonal to the given block, and
    that dependent columns are dropped.
    """
    rng = np.random.default_rng(1)
    U = s_orthonormalize(mass_matrix, rng.standard_normal((30, 2)))
    B = rng.standard_normal((30, 4))
    B[:, 3] = B[:, 0] - 2.0 * B[:, 1]
    Q = s_orthonormalize(mass_matrix, B, U)
    assert Q.shape == (30, 3)
    SQ = spmv(mass_matrix, Q)
    np.testing.assert_allclose(Q.T @ SQ, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(U.T @ SQ, np.zeros((2, 3)), atol=1e-12)


def test_s_orthonormalize_every_column_dropped(mass_matrix):
    U = s_orthonormalize(mass_matrix, np.eye(30)[:, :2])
    with pytest.raises(EmptyBasisError):
        s_orthonormalize(mass_matrix, np.zeros((30, 2)))
    with pytest.raises(EmptyBasisError):
        s_orthonormalize(mass_matrix, U[:, :1], U)


def test_s_norm(mass_matrix):
    x = np.ones(30)
    assert s_norm(mass_matrix, x) == pytest.approx(np.sqrt(x @ mass_matrix.toarray() @ x), rel=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_jacobi_and_lapack_agree(seed):
    """
    Check that the Jacobi sweeps and LAPACK give the same eigenvalues and
    orthonormal eigenvectors.
    """
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((20, 20))
    A = A + A.T
    jacobi_values, jacobi_vectors = dense_sym_eig(A)
    lapack_values, _ = dense_sym_eig(A, jacobi_limit=0)
    np.testing.assert_allclose(jacobi_values, lapack_values, atol=1e-10)
    np.testing.assert_allclose(jacobi_vectors.T @ jacobi_vectors, np.eye(20), atol=1e-12)
    np.testing.assert_allclose(
        A @ jacobi_vectors, jacobi_vectors * jacobi_values[None, :], atol=1e-10
    )
    assert np.all(np.diff(jacobi_values) >= 0.0)


def test_dense_sym_eig_invalid():
    with pytest.raises(NotSymmetricError):
        dense_sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))
    with pytest.raises(DenseLimitError):
        dense_sym_eig(np.eye(5), dense_limit=4)


def test_rayleigh_quotient(diagonal_pencil):
    z = np.zeros(10)
    z[[0, 9]] = 1.0
    assert rayleigh_quotient(diagonal_pencil, z) == pytest.approx(5.5, rel=1e-15)
    with pytest.raises(ZeroVectorError):
        rayleigh_quotient(diagonal_pencil, np.zeros(10))


def test_rayleigh_ritz_invariant_subspace(diagonal_pencil):
    """
    Check that an invariant subspace gives back its eigenvalues, and that the
    Ritz pairs of a deflated basis lie above the deflated eigenvalues.
    """
    rng = np.random.default_rng(2)
    mix = rng.standard_normal((3, 3))
    basis = np.zeros((10, 3))
    basis[[1, 4, 6], :] = mix
    ritz = rayleigh_ritz(diagonal_pencil, basis, range(3))
    np.testing.assert_allclose(ritz.values, [2.0, 5.0, 7.0], rtol=1e-12)
    assert ritz.subspace_dim == 3

    U = np.eye(10)[:, :2]
    deflated = rayleigh_ritz(diagonal_pencil, rng.standard_normal((10, 4)), range(2), U)
    assert np.all(deflated.values >= 3.0 - 1e-12)
    np.testing.assert_allclose(U.T @ deflated.vectors, np.zeros((2, 2)), atol=1e-12)


def test_rayleigh_ritz_rank_collapse(diagonal_pencil):
    basis = np.zeros((10, 2))
    basis[0, :] = 1.0
    with pytest.raises(RankCollapseError):
        rayleigh_ritz(diagonal_pencil, basis, range(2))


@pytest.mark.parametrize("size", [2, 3, 4, 8, 16, 32])
@pytest.mark.parametrize("seed", range(10))
def test_jacobi_converges_on_random_matrices(size, seed):
    """
    Check that the Jacobi sweeps converge on random symmetric matrices of every
    size they handle, including matrices with an already zero off-diagonal
    part after a few sweeps.
    """
    rng = np.random.default_rng(100 * size + seed)
    A = rng.uniform(-10.0, 10.0, size=(size, size))
    A = A + A.T
    values, vectors = dense_sym_eig(A)
    np.testing.assert_allclose(values, np.linalg.eigvalsh(A), atol=1e-10 * np.linalg.norm(A))
    np.testing.assert_allclose(vectors.T @ vectors, np.eye(size), atol=1e-12)


def test_jacobi_on_nearly_converged_matrix():
    A = np.array(
        [
            [19.126, 0.0, 8.888, -0.847],
            [0.0, 21.153, -0.044, 8.162],
            [8.888, -0.044, 6.928, -0.831],
            [-0.847, 8.162, -0.831, 10.424],
        ]
    )
    values, vectors = dense_sym_eig(A)
    np.testing.assert_allclose(values, np.linalg.eigvalsh(A), atol=1e-12)
    np.testing.assert_allclose(A @ vectors, vectors * values[None, :], atol=1e-11)


def test_s_orthonormalize_ill_conditioned(mass_matrix):
    """
    Check S-orthonormality of the result for a block whose Gram matrix
    B^T S B has condition number 1e8, and that the span is kept.
    """
    rng = np.random.default_rng(7)
    W = s_orthonormalize(mass_matrix, rng.standard_normal((30, 3)))
    rotation, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    B = W @ np.diag([1.0, 1e-2, 1e-4]) @ rotation
    gram = B.T @ spmv(mass_matrix, B)
    assert np.linalg.cond(gram) == pytest.approx(1e8, rel=1e-4)

    Q = s_orthonormalize(mass_matrix, B)
    assert Q.shape == (30, 3)
    SQ = spmv(mass_matrix, Q)
    assert np.linalg.norm(Q.T @ SQ - np.eye(3)) <= 1e-10
    np.testing.assert_allclose(Q @ (SQ.T @ B), B, atol=1e-10)


def test_ritz_set_properties(diagonal_pencil):
    """
    Check that the Ritz vectors diagonalise H, are S-orthonormal, and that the
    Ritz values are bounded below by the matching eigenvalues and above by the
    largest one.
    """
    basis = np.random.default_rng(4).standard_normal((10, 4))
    ritz = rayleigh_ritz(diagonal_pencil, basis, range(4))
    V = ritz.vectors
    np.testing.assert_allclose(
        V.T @ spmv(diagonal_pencil.H, V), np.diag(ritz.values), atol=1e-12
    )
    np.testing.assert_allclose(V.T @ spmv(diagonal_pencil.S, V), np.eye(4), atol=1e-12)
    eigenvalues = np.arange(1.0, 11.0)
    assert np.all(ritz.values >= eigenvalues[:4] - 1e-12)
    assert np.all(ritz.values <= 10.0 + 1e-12)
