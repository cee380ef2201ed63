from __future__ import annotations

import math
from enum import Enum
from typing import TYPE_CHECKING, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator
from pydantic_core import PydanticCustomError

from psdid.logger import logger

if TYPE_CHECKING:
    from psdid.solver import BlockIterState, DeflationSet


class ShiftVariant(str, Enum):
    FIXED = "fixed"
    PREV_EIG = "prev_eig"
    DYNAMIC = "dynamic"


class ShiftStrategy(BaseModel):
    """
    How the shift sigma of the preconditioner is chosen. A run starts from
    sigma0, or from the last accepted eigenvalue plus offset for the prev_eig and
    dynamic variants once an eigenvalue has been accepted. The dynamic variant
    then moves sigma to (sigma + theta_i) / 2 when the smallest Ritz value has
    stagnated enough and the residual of the wanted columns is small.
    """

    model_config = ConfigDict(extra="forbid")

    variant: ShiftVariant = ShiftVariant.FIXED
    sigma0: float = 0.0
    offset: float = 0.0
    eta_threshold: float = 0.1
    res_threshold: float = 0.1
    refine_tol_floor: float = 1e-12

    @field_validator("sigma0", "offset")
    @classmethod
    def finite(cls, value: float) -> float:
        if not math.isfinite(value):
            raise PydanticCustomError("shift_not_finite", "Shift parameters must be finite")
        return value

    def initial_shift(self, defl: DeflationSet) -> float:
        """
        Shift used at the beginning of a run.
        :param defl: deflation set of the run.
        :return: initial sigma.
        """
        if self.variant != ShiftVariant.FIXED and len(defl.eigenvalues) > 0:
            return float(defl.eigenvalues[-1]) + self.offset
        return self.sigma0


class ShiftUpdate(BaseModel):
    sigma: float
    switched: bool = False
    inner_tolerance: Optional[float] = None
    eta: Optional[float] = None


def update_shift(
    strategy: ShiftStrategy,
    sigma: float,
    state: BlockIterState,
    previous_theta: Optional[Sequence[float]],
    defl: DeflationSet,
    k: int = 1,
) -> ShiftUpdate:
    """
    Shift to use for the next outer step.
    :param strategy: shift strategy.
    :param sigma: current shift.
    :param state: state just produced by an outer step.
    :param previous_theta: Ritz values of the state before that step.
    :param defl: deflation set of the run.
    :param k: number of wanted columns, whose root sum square S^-1 residual
    norm is compared with res_threshold.
    :return: the new shift, whether a dynamic switch happened, and the tightened
    inner tolerance on a switch.
    """
    if strategy.variant == ShiftVariant.FIXED:
        return ShiftUpdate(sigma=sigma)
    if strategy.variant == ShiftVariant.PREV_EIG:
        if len(defl.eigenvalues) == 0:
            return ShiftUpdate(sigma=sigma)
        return ShiftUpdate(sigma=float(defl.eigenvalues[-1]) + strategy.offset)

    theta = state.theta
    if len(theta) < 2 or previous_theta is None or len(previous_theta) == 0:
        return ShiftUpdate(sigma=sigma)
    theta_i, theta_next = float(theta[0]), float(theta[1])
    gap = theta_next - theta_i
    if gap <= 0.0:
        return ShiftUpdate(sigma=sigma)

    eta = (float(previous_theta[0]) - theta_i) / gap
    residual = math.sqrt(float(np.sum(np.asarray(state.resnorms[:k]) ** 2)))
    if eta < strategy.eta_threshold and residual < strategy.res_threshold:
        candidate = 0.5 * (sigma + theta_i)
        if candidate < 0.5 * (theta_i + theta_next):
            logger.info(
                f"Dynamic shift switch {sigma} -> {candidate} (eta {eta:.3e}, residual {residual:.3e})"
            )
            return ShiftUpdate(
                sigma=candidate,
                switched=True,
                inner_tolerance=max(eta, strategy.refine_tol_floor),
                eta=eta,
            )
        logger.debug(f"Dynamic shift {candidate} rejected, outside the Ritz window")
    return ShiftUpdate(sigma=sigma, eta=eta)
