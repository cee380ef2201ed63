import os

import numpy as np
import pytest
from pydantic import ValidationError

from psdid.exceptions import MatrixMarketError
from psdid.linalg import SparseMatrix
from psdid.oracle import dense_oracle
from psdid.problems import (
    Slit,
    SlitRectangleSpec,
    analytic_rectangle_eigs,
    build_slit_laplacian,
    mm_read,
    mm_write,
    slit_node_range,
)
from psdid.suites import LONG_SLITS, SHORT_SLITS, slit_rectangle
from tests import MATRICES_DIR


@pytest.mark.parametrize(
    "slits, h, expected",
    [
        (SHORT_SLITS, 1 / 80, 9383),
        (LONG_SLITS, 1 / 80, 9271),
        (SHORT_SLITS, 1 / 16, 343),
        (LONG_SLITS, 1 / 20, 517),
    ],
)
def test_slit_node_counts(slits, h, expected):
    """
    Check the number of retained nodes of the slit rectangles.
    """
    pencil, grid = build_slit_laplacian(slit_rectangle(slits, h))
    assert pencil.n == expected
    assert grid.node_count == expected
    assert grid.coordinates().shape == (expected, 2)


def test_unit_square():
    """
    Check the 3 x 3 interior grid of the unit square with h = 1/4 and its
    smallest eigenvalue 64 (1 - cos(pi / 4)).
    """
    spec = SlitRectangleSpec(width=1.0, height=1.0, h=0.25)
    pencil, grid = build_slit_laplacian(spec)
    assert pencil.n == 9
    assert grid.removed_count == 0
    assert pencil.S.is_identity
    H = pencil.H.toarray()
    np.testing.assert_array_equal(np.diag(H), np.full(9, 64.0))
    np.testing.assert_array_equal(H, H.T)
    assert np.all(np.sum(H != 0.0, axis=1) <= 5)
    oracle = dense_oracle(pencil)
    assert oracle.eigenvalue(1) == pytest.approx(18.7451, abs=1e-4)
    np.testing.assert_allclose(
        oracle.eigenvalues, analytic_rectangle_eigs(1.0, 1.0, 0.25, 9), rtol=1e-12
    )


def test_rectangle_matches_closed_form():
    pencil, _ = build_slit_laplacian(SlitRectangleSpec(width=1.5, height=1.0, h=0.125))
    values = dense_oracle(pencil).eigenvalues[:6]
    np.testing.assert_allclose(values, analytic_rectangle_eigs(1.5, 1.0, 0.125, 6), rtol=1e-12)


def test_node_numbering():
    """
    Check that y varies fastest and that slit nodes carry -1.
    """
    spec = SlitRectangleSpec(
        width=1.0, height=1.0, h=0.25, slits=[Slit(x=0.5, y0=0.25, y1=0.5)]
    )
    pencil, grid = build_slit_laplacian(spec)
    assert pencil.n == 7
    assert grid.index[0].tolist() == [0, 1, 2]
    assert grid.index[1].tolist() == [-1, -1, 3]
    assert grid.index[2].tolist() == [4, 5, 6]
    # node 3 lies between the slit and the top boundary
    H = pencil.H.toarray()
    assert np.count_nonzero(H[3]) == 3


def test_slit_node_range():
    assert slit_node_range(Slit(x=0.5, y0=0.45, y1=0.55), 1 / 16, 15) == (7, 7)
    assert slit_node_range(Slit(x=0.5, y0=0.5, y1=0.5), 0.25, 3) == (1, 1)
    first, last = slit_node_range(Slit(x=0.5, y0=0.3, y1=0.45), 0.25, 3)
    assert first > last


@pytest.mark.parametrize(
    "fields",
    [
        {"width": 1.0, "height": 1.0, "h": 0.3},
        {"width": 1.0, "height": 1.0, "h": -0.25},
        {"width": 1.0, "height": 1.0, "h": 0.25, "slits": [{"x": 1.0, "y0": 0.25, "y1": 0.5}]},
        {"width": 1.0, "height": 1.0, "h": 0.25, "slits": [{"x": 0.3, "y0": 0.25, "y1": 0.5}]},
        {"width": 1.0, "height": 1.0, "h": 0.25, "slits": [{"x": 0.5, "y0": 0.0, "y1": 0.5}]},
        {"width": 1.0, "height": 1.0, "h": 0.25, "slits": [{"x": 0.5, "y0": 0.5, "y1": 0.25}]},
    ],
)
def test_invalid_grids(fields):
    with pytest.raises(ValidationError):
        SlitRectangleSpec.model_validate(fields)


def test_mm_read_valids():
    diagonal = mm_read(os.path.join(MATRICES_DIR, "valids", "diagonal_10.mtx"))
    assert diagonal.symmetric
    np.testing.assert_array_equal(diagonal.toarray(), np.diag(np.arange(1.0, 11.0)))

    mass = mm_read(os.path.join(MATRICES_DIR, "valids", "mass_6.mtx"))
    assert mass.nnz == 16
    assert mass.toarray()[0, 0] == 2.0 / 3.0

    general = mm_read(os.path.join(MATRICES_DIR, "valids", "general_3.mtx"))
    assert not general.symmetric
    assert general.n == 3


@pytest.mark.parametrize(
    "file_name", ["rectangular.mtx", "array_format.mtx", "complex_field.mtx", "bad_header.mtx"]
)
def test_mm_read_invalids(file_name):
    """
    Check that unsupported or malformed files raise a MatrixMarketError with
    the configuration error exit code.
    """
    with pytest.raises(MatrixMarketError) as error:
        mm_read(os.path.join(MATRICES_DIR, "invalids", file_name))
    assert error.value.exit_code == 3


def test_mm_read_missing_file():
    with pytest.raises(MatrixMarketError):
        mm_read(os.path.join(MATRICES_DIR, "valids", "no_such_matrix.mtx"))


def test_mm_write_keeps_every_bit(tmp_path):
    """
    Check that writing then reading gives back the stored pattern and values
    bit for bit.
    """
    values = np.array(
        [[1.0 / 3.0, np.pi, 0.0], [np.e, 2.0, -1e-300], [0.0, 7.0, 1e300]]
    )
    A = SparseMatrix.from_dense(values)
    path = os.path.join(tmp_path, "general.mtx")
    mm_write(A, path)
    B = mm_read(path)
    assert not B.symmetric
    np.testing.assert_array_equal(A.matrix.indptr, B.matrix.indptr)
    np.testing.assert_array_equal(A.matrix.indices, B.matrix.indices)
    np.testing.assert_array_equal(A.matrix.data, B.matrix.data)

    pencil, _ = build_slit_laplacian(slit_rectangle(SHORT_SLITS, 1 / 16))
    symmetric_path = os.path.join(tmp_path, "nested", "H.mtx")
    mm_write(pencil.H, symmetric_path)
    with open(symmetric_path) as stream:
        assert "symmetric" in stream.readline()
    H = mm_read(symmetric_path)
    assert H.symmetric
    assert H.fingerprint() == pencil.H.fingerprint()


def test_slit_spectrum_within_gershgorin_interval():
    """
    Check that every eigenvalue of the short slit Laplacian lies in (0, 8 / h^2].
    """
    h = 1 / 16
    pencil, _ = build_slit_laplacian(slit_rectangle(SHORT_SLITS, h))
    eigenvalues = dense_oracle(pencil).eigenvalues
    assert eigenvalues[0] > 0.0
    assert eigenvalues[-1] <= 8.0 / h**2 * (1.0 + 1e-12)


def test_smallest_eigenvalue_under_refinement():
    """
    Check that the smallest eigenvalue of the five-point Laplacian on the
    rectangle grows monotonically towards the continuum value from below as h
    is refined.
    """
    width, height = 1.5, 1.0
    continuum = np.pi**2 * (1.0 / width**2 + 1.0 / height**2)
    smallest = [analytic_rectangle_eigs(width, height, h, 1)[0] for h in (1 / 10, 1 / 20, 1 / 40)]
    assert smallest[0] < smallest[1] < smallest[2] < continuum
    assert continuum - smallest[2] < 0.25 * (continuum - smallest[0])

    for h, expected in zip((1 / 10, 1 / 20), smallest):
        pencil, _ = build_slit_laplacian(SlitRectangleSpec(width=width, height=height, h=h))
        assert dense_oracle(pencil).eigenvalue(1) == pytest.approx(expected, rel=1e-12)
