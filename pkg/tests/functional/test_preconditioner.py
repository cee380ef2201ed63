import numpy as np
import pytest
import scipy.sparse
from pydantic import ValidationError

from psdid.exceptions import BandwidthError, SingularShiftError
from psdid.linalg import Pencil, SparseMatrix, s_orthonormalize, spmv
from psdid.preconditioner import (
    BandFactorization,
    InnerPreconditionerKind,
    Preconditioner,
    PreconditionerSpec,
    PreconditionerVariant,
    band_width,
    projected_solve,
    shifted_matrix,
)


def laplacian_pencil(n: int) -> Pencil:
    off = np.full(n - 1, -1.0)
    H = scipy.sparse.diags([off, np.full(n, 2.0), off], [-1, 0, 1])
    mass_off = np.full(n - 1, 1.0 / 6.0)
    S = scipy.sparse.diags([mass_off, np.full(n, 4.0 / 6.0), mass_off], [-1, 0, 1])
    return Pencil(H=SparseMatrix(matrix=H, symmetric=True), S=SparseMatrix(matrix=S, symmetric=True))


@pytest.fixture()
def diagonal_pencil():
    return Pencil.from_dense(np.diag(np.arange(1.0, 11.0)))


@pytest.fixture()
def laplacian():
    return laplacian_pencil(30)


def test_band_width(laplacian, diagonal_pencil):
    assert band_width(laplacian.H) == 1
    assert band_width(diagonal_pencil.H) == 0
    assert band_width(SparseMatrix.from_dense(np.eye(4)[::-1])) == 3


def test_exact_shift_invert(laplacian):
    """
    Check that the exact preconditioner inverts H - sigma S on a block.
    """
    K = Preconditioner.build(
        PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT, shift=0.5), laplacian
    )
    rng = np.random.default_rng(0)
    R = rng.standard_normal((30, 3))
    P = K.apply(R)
    shifted = shifted_matrix(laplacian, 0.5)
    np.testing.assert_allclose(shifted @ P, R, atol=1e-11)
    assert K.label == "exact_shift_invert"
    assert K.sigma == 0.5


def test_exact_shift_invert_at_an_eigenvalue(diagonal_pencil):
    """
    Check that a shift equal to an eigenvalue is reported as a singular shift
    with the row of the zero pivot.
    """
    with pytest.raises(SingularShiftError) as error:
        Preconditioner.build(PreconditionerSpec(shift=3.0), diagonal_pencil)
    assert error.value.sigma == 3.0
    assert error.value.pivot_index == 2


def test_bandwidth_cap(laplacian):
    with pytest.raises(BandwidthError) as error:
        Preconditioner.build(PreconditionerSpec(shift=0.0, bandwidth_cap=0), laplacian)
    assert error.value.bandwidth == 1


def test_band_factorization_dimension(laplacian):
    factorization = BandFactorization.factorize(shifted_matrix(laplacian, 0.0), 1)
    assert factorization.n == 30
    with pytest.raises(ValueError):
        factorization.solve(np.ones(29))


def test_identity_and_diagonal(diagonal_pencil):
    R = np.ones((10, 2))
    identity = Preconditioner.build(
        PreconditionerSpec(variant=PreconditionerVariant.IDENTITY), diagonal_pencil
    )
    np.testing.assert_array_equal(identity.apply(R), R)

    diagonal = Preconditioner.build(
        PreconditionerSpec(variant=PreconditionerVariant.DIAGONAL, shift=0.5), diagonal_pencil
    )
    expected = 1.0 / (np.arange(1.0, 11.0) - 0.5)
    np.testing.assert_allclose(diagonal.apply(R)[:, 1], expected, rtol=1e-15)
    with pytest.raises(SingularShiftError):
        Preconditioner.build(
            PreconditionerSpec(variant=PreconditionerVariant.DIAGONAL, shift=4.0), diagonal_pencil
        )


@pytest.mark.parametrize("inner_preconditioner", [None, InnerPreconditionerKind.DIAGONAL])
def test_inner_krylov_reaches_tolerance(laplacian, inner_preconditioner):
    """
    Check that every column of an inner Krylov application reaches the
    requested relative residual.
    """
    spec = PreconditionerSpec(
        variant=PreconditionerVariant.INNER_KRYLOV,
        shift=0.005,
        tolerance=1e-6,
        max_iterations=500,
        inner_preconditioner=inner_preconditioner,
    )
    K = Preconditioner.build(spec, laplacian)
    rng = np.random.default_rng(1)
    R = rng.standard_normal((30, 2))
    preconditioned = K.solve(R)
    shifted = shifted_matrix(laplacian, 0.005)
    for j in range(2):
        achieved = np.linalg.norm(R[:, j] - shifted @ preconditioned.block[:, j])
        assert achieved <= 1e-6 * np.linalg.norm(R[:, j]) * (1.0 + 1e-6)
    assert len(preconditioned.report.relative_residuals) == 2
    assert preconditioned.report.max_residual <= 1e-6
    assert not preconditioned.report.warning


def test_inner_krylov_budget_exhausted(laplacian):
    spec = PreconditionerSpec(
        variant=PreconditionerVariant.INNER_KRYLOV, shift=0.005, tolerance=1e-12, max_iterations=2
    )
    preconditioned = Preconditioner.build(spec, laplacian).solve(np.ones((30, 1)))
    assert preconditioned.report.warning
    assert preconditioned.report.max_residual > 1e-12


def test_projected_inner_krylov(laplacian):
    """
    Check that the projected preconditioner returns directions S-orthogonal to
    the deflation basis and to the current block.
    """
    rng = np.random.default_rng(2)
    U = s_orthonormalize(laplacian.S, rng.standard_normal((30, 2)))
    Z = s_orthonormalize(laplacian.S, rng.standard_normal((30, 2)), U)
    R = rng.standard_normal((30, 2))
    spec = PreconditionerSpec(
        variant=PreconditionerVariant.PROJECTED_INNER_KRYLOV, shift=0.0, tolerance=1e-8
    )
    K = Preconditioner.build(spec, laplacian)
    P = K.solve(R, deflation_basis=U, block=Z).block
    SP = spmv(laplacian.S, P)
    scale = np.linalg.norm(P)
    assert np.max(np.abs(U.T @ SP)) <= 1e-10 * scale
    assert np.max(np.abs(Z.T @ SP)) <= 1e-10 * scale

    with pytest.raises(ValueError):
        K.solve(R, deflation_basis=U)


def test_projected_solve(laplacian):
    rng = np.random.default_rng(3)
    z = s_orthonormalize(laplacian.S, rng.standard_normal(30))[:, 0]
    r = rng.standard_normal(30)
    p = projected_solve(laplacian, None, z, 0.0, r, 1e-8)
    assert abs(z @ spmv(laplacian.S, p)) <= 1e-10 * np.linalg.norm(p)


def test_spec_validation():
    with pytest.raises(ValidationError):
        PreconditionerSpec(tolerance=1.0)
    with pytest.raises(ValidationError):
        PreconditionerSpec(tolerance=0.0)
    with pytest.raises(ValidationError):
        PreconditionerSpec(shift=float("nan"))
    with pytest.raises(ValidationError):
        PreconditionerSpec(variant="multigrid")

    spec = PreconditionerSpec(variant=PreconditionerVariant.INNER_KRYLOV, tolerance=0.1)
    moved = spec.with_shift(2.0, tolerance=0.0)
    assert moved.shift == 2.0
    assert 0.0 < moved.tolerance < 1e-14
    assert spec.shift == 0.0


def test_inner_krylov_is_linear(laplacian):
    """
    Check that a tight inner Krylov preconditioner is linear in its input up to
    the inner tolerance.
    """
    tolerance = 1e-10
    spec = PreconditionerSpec(
        variant=PreconditionerVariant.INNER_KRYLOV, shift=0.0, tolerance=tolerance
    )
    K = Preconditioner.build(spec, laplacian)
    rng = np.random.default_rng(5)
    r1, r2 = rng.standard_normal((30, 1)), rng.standard_normal((30, 1))
    a, b = 2.0, -3.0
    difference = K.apply(a * r1 + b * r2) - a * K.apply(r1) - b * K.apply(r2)
    scale = abs(a) * np.linalg.norm(r1) + abs(b) * np.linalg.norm(r2)
    H = laplacian.H.toarray()
    assert np.linalg.norm(H @ difference) <= 10.0 * tolerance * scale
    inverse_norm = np.linalg.norm(np.linalg.inv(H), 2)
    assert np.linalg.norm(difference) <= 10.0 * tolerance * inverse_norm * scale


def test_projected_solve_on_diagonal_pencil():
    """
    Check that on a diagonal pencil with U = [e1] and z = e2 the restricted
    system is solved by dividing by lambda_j - sigma on the other coordinates.
    """
    eigenvalues = np.arange(1.0, 7.0)
    pencil = Pencil.from_dense(np.diag(eigenvalues))
    identity = np.eye(6)
    sigma = 1.5
    r = np.array([0.0, 0.0, 1.0, 2.0, 3.0, 4.0])
    p = projected_solve(pencil, identity[:, :1], identity[:, 1], sigma, r, 1e-12)
    expected = np.zeros(6)
    expected[2:] = r[2:] / (eigenvalues[2:] - sigma)
    np.testing.assert_allclose(p, expected, atol=1e-10)
