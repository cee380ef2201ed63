"""
Test problems: five-point finite difference Laplacians on rectangles with
vertical slits, and Matrix Market exchange of sparse matrices.
"""

from __future__ import annotations

import hashlib
import math
import os
from typing import List, Sequence, Tuple

import numpy as np
import scipy.io
import scipy.sparse
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from pydantic_core import PydanticCustomError

from psdid.exceptions import DomainError, InvalidGridError, MatrixMarketError
from psdid.linalg import Pencil, SparseMatrix
from psdid.logger import logger

GRID_TOLERANCE = 1e-9
MM_PRECISION = 17


def _grid_steps(length: float, h: float) -> int:
    steps = length / h
    if abs(steps - round(steps)) > GRID_TOLERANCE * max(1.0, steps):
        raise PydanticCustomError(
            "not_on_grid",
            "{length} is not a multiple of the mesh size {h}",
            {"length": length, "h": h},
        )
    return int(round(steps))


class Slit(BaseModel):
    """
    Vertical slit {x} x [y0, y1].
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    x: float
    y0: float
    y1: float

    @model_validator(mode="after")
    def ordered(self) -> Slit:
        if self.y0 > self.y1:
            raise PydanticCustomError("slit_order", "Slit must satisfy y0 <= y1")
        return self


class SlitRectangleSpec(BaseModel):
    """
    Rectangle [0, width] x [0, height] meshed with size h, with homogeneous
    Dirichlet conditions on the boundary and on the slits.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    width: float
    height: float
    h: float
    slits: List[Slit] = []

    @field_validator("width", "height", "h")
    @classmethod
    def positive(cls, value: float) -> float:
        if not value > 0.0 or not math.isfinite(value):
            raise PydanticCustomError("not_positive", "Lengths must be positive and finite")
        return value

    @model_validator(mode="after")
    def grid_fits(self) -> SlitRectangleSpec:
        _grid_steps(self.width, self.h)
        _grid_steps(self.height, self.h)
        for slit in self.slits:
            steps = _grid_steps(slit.x, self.h)
            if not 0 < steps < round(self.width / self.h):
                raise PydanticCustomError(
                    "slit_outside", "Slit x = {x} must be interior", {"x": slit.x}
                )
            if not 0.0 < slit.y0 <= slit.y1 < self.height:
                raise PydanticCustomError(
                    "slit_outside",
                    "Slit y range [{y0}, {y1}] must lie within (0, height)",
                    {"y0": slit.y0, "y1": slit.y1},
                )
        return self

    @property
    def nx(self) -> int:
        return int(round(self.width / self.h)) - 1

    @property
    def ny(self) -> int:
        return int(round(self.height / self.h)) - 1


class GridIndexMap(BaseModel):
    """
    Matrix index of every interior node (ix, iy), at coordinates
    ((ix + 1) h, (iy + 1) h), or -1 for slit nodes. Nodes are numbered with y
    varying fastest.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    h: float
    index: np.ndarray

    @property
    def nx(self) -> int:
        return self.index.shape[0]

    @property
    def ny(self) -> int:
        return self.index.shape[1]

    @property
    def node_count(self) -> int:
        return int(np.count_nonzero(self.index >= 0))

    @property
    def removed_count(self) -> int:
        return self.index.size - self.node_count

    def coordinates(self) -> np.ndarray:
        """
        (n, 2) array of node coordinates in matrix order.
        """
        ix, iy = np.nonzero(self.index >= 0)
        return np.column_stack([(ix + 1) * self.h, (iy + 1) * self.h])

    def fingerprint(self) -> str:
        return hashlib.sha256(self.index.astype(np.int64).tobytes()).hexdigest()


def slit_node_range(slit: Slit, h: float, ny: int) -> Tuple[int, int]:
    """
    Interior y indices covered by a slit, endpoints included.
    """
    first = math.ceil(slit.y0 / h - GRID_TOLERANCE) - 1
    last = math.floor(slit.y1 / h + GRID_TOLERANCE) - 1
    return max(first, 0), min(last, ny - 1)


def build_slit_laplacian(spec: SlitRectangleSpec) -> Tuple[Pencil, GridIndexMap]:
    """
    Five-point star discretisation of the Laplacian: 4 / h^2 on the diagonal
    and -1 / h^2 for every retained neighbour.
    :param spec: domain and mesh.
    :return: pencil with S = I, and the node numbering.
    """
    nx, ny, h = spec.nx, spec.ny, spec.h
    retained = np.ones((max(nx, 0), max(ny, 0)), dtype=bool)
    for slit in spec.slits:
        ix = int(round(slit.x / h)) - 1
        first, last = slit_node_range(slit, h, ny)
        if first <= last:
            retained[ix, first : last + 1] = False
    n = int(np.count_nonzero(retained))
    if n == 0:
        raise InvalidGridError("The grid has no interior node")

    index = np.full(retained.shape, -1, dtype=np.int64)
    index[retained] = np.arange(n)

    scale = 1.0 / (h * h)
    rows = [np.arange(n)]
    cols = [np.arange(n)]
    values = [np.full(n, 4.0 * scale)]
    for first, second in ((index[:-1, :], index[1:, :]), (index[:, :-1], index[:, 1:])):
        linked = (first >= 0) & (second >= 0)
        a, b = first[linked], second[linked]
        rows += [a, b]
        cols += [b, a]
        values += [np.full(a.size, -scale), np.full(a.size, -scale)]
    H = scipy.sparse.coo_matrix(
        (np.concatenate(values), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    ).tocsr()

    grid = GridIndexMap(h=h, index=index)
    logger.info(
        f"Slit Laplacian on {spec.width} x {spec.height}, h = {h}: n = {n} "
        f"({grid.removed_count} slit nodes removed)"
    )
    pencil = Pencil(H=SparseMatrix(matrix=H, symmetric=True), S=SparseMatrix.identity(n))
    return pencil, grid


def analytic_rectangle_eigs(
    width: float, height: float, h: float, count: int, slits: Sequence[Slit] = ()
) -> np.ndarray:
    """
    Smallest eigenvalues of the five-point Laplacian on a rectangle without
    slits, (4 / h^2) (sin^2(p pi h / (2 width)) + sin^2(q pi h / (2 height))).
    :param width: rectangle width.
    :param height: rectangle height.
    :param h: mesh size.
    :param count: number of eigenvalues.
    :param slits: must be empty.
    :return: ascending eigenvalues.
    """
    if len(slits) > 0:
        raise DomainError("No closed form eigenvalues with slits")
    spec = SlitRectangleSpec(width=width, height=height, h=h)
    p = np.arange(1, spec.nx + 1)
    q = np.arange(1, spec.ny + 1)
    along_x = np.sin(p * math.pi * h / (2.0 * width)) ** 2
    along_y = np.sin(q * math.pi * h / (2.0 * height)) ** 2
    values = np.sort((4.0 / (h * h)) * (along_x[:, None] + along_y[None, :]).ravel())
    if not 1 <= count <= values.size:
        raise DomainError(f"count must lie in [1, {values.size}], got {count}")
    return values[:count]


def mm_read(path: str) -> SparseMatrix:
    """
    Read a real coordinate Matrix Market file. Symmetric files are expanded to
    the full pattern and flagged symmetric.
    :param path: file path.
    :return: sparse matrix.
    """
    try:
        rows, cols, _, layout, field, symmetry = scipy.io.mminfo(path)
        if layout != "coordinate":
            raise MatrixMarketError(path, f"unsupported format {layout}")
        if field not in ("real", "integer"):
            raise MatrixMarketError(path, f"unsupported field {field}")
        if symmetry not in ("general", "symmetric"):
            raise MatrixMarketError(path, f"unsupported symmetry {symmetry}")
        if rows != cols:
            raise MatrixMarketError(path, f"matrix is {rows} x {cols}, not square")
        matrix = scipy.io.mmread(path)
    except MatrixMarketError:
        raise
    except (OSError, ValueError, IndexError, TypeError) as e:
        raise MatrixMarketError(path, str(e))
    logger.debug(f"Read {rows} x {cols} matrix from {path}")
    return SparseMatrix(matrix=scipy.sparse.csr_matrix(matrix), symmetric=symmetry == "symmetric")


def mm_write(A: SparseMatrix, path: str):
    """
    Write a sparse matrix in Matrix Market coordinate format with 17 significant
    digits, in symmetric storage when the values are symmetric.
    :param A: sparse matrix.
    :param path: file path, ending with .mtx.
    """
    symmetric = A.symmetric and (A.matrix != A.matrix.T).nnz == 0
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    scipy.io.mmwrite(
        path,
        A.matrix.tocoo(),
        field="real",
        precision=MM_PRECISION,
        symmetry="symmetric" if symmetric else "general",
    )
