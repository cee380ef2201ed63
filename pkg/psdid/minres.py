"""
Minimum residual solves of symmetric, possibly indefinite or singular but
consistent, linear systems given as operators.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np
import scipy.sparse.linalg
from pydantic import BaseModel, ConfigDict

Operator = Callable[[np.ndarray], np.ndarray]

# restarts from the current iterate when the true residual misses the tolerance
MAX_RESTARTS = 3


class MinresResult(BaseModel):
    """
    Outcome of a minimum residual solve. The relative residual is the true
    residual ||b - A x||_2 / ||b||_2 of the returned iterate.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True)

    x: np.ndarray
    relative_residual: float
    iterations: int
    converged: bool


def minres(
    operator: Operator,
    b: np.ndarray,
    tol: float,
    max_iterations: int,
    preconditioner: Optional[Operator] = None,
) -> MinresResult:
    """
    Solve A x = b with scipy's MINRES, starting from x = 0. scipy stops on an
    estimate of the residual; the true residual is checked afterwards and the
    solve restarted on the remaining residual while the iteration budget lasts.
    :param operator: symmetric operator x -> A x.
    :param b: right-hand side.
    :param tol: relative residual tolerance.
    :param max_iterations: maximal number of iterations over all restarts.
    :param preconditioner: symmetric positive definite operator x -> M^-1 x.
    :return: the last iterate and its true relative residual.
    """
    n = b.shape[0]
    x = np.zeros(n)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return MinresResult(x=x, relative_residual=0.0, iterations=0, converged=True)

    A = scipy.sparse.linalg.LinearOperator((n, n), matvec=operator, dtype=np.float64)
    M = (
        None
        if preconditioner is None
        else scipy.sparse.linalg.LinearOperator((n, n), matvec=preconditioner, dtype=np.float64)
    )
    iterations = 0

    def count(_):
        nonlocal iterations
        iterations += 1

    relative_residual = 1.0
    for _ in range(MAX_RESTARTS + 1):
        budget = max_iterations - iterations
        if budget <= 0:
            break
        residual = b - A @ x
        residual_norm = float(np.linalg.norm(residual))
        relative_residual = residual_norm / b_norm
        if relative_residual <= tol:
            break
        correction, _ = scipy.sparse.linalg.minres(
            A,
            residual,
            rtol=min(tol * b_norm / residual_norm, 0.5),
            maxiter=budget,
            M=M,
            callback=count,
        )
        x = x + correction
        relative_residual = float(np.linalg.norm(b - A @ x)) / b_norm
        if relative_residual <= tol:
            break
    return MinresResult(
        x=x,
        relative_residual=relative_residual,
        iterations=iterations,
        converged=relative_residual <= tol,
    )
