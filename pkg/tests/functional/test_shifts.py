import numpy as np
import pytest
from pydantic import ValidationError

from psdid.shifts import ShiftStrategy, ShiftVariant, update_shift
from psdid.solver import BlockIterState, DeflationSet


def state(theta, resnorms) -> BlockIterState:
    theta = np.asarray(theta, dtype=float)
    return BlockIterState(
        Z=np.eye(4)[:, : len(theta)],
        theta=theta,
        R=np.zeros((4, len(theta))),
        resnorms=np.asarray(resnorms, dtype=float),
        psi=np.zeros(len(theta)),
        step=3,
    )


@pytest.fixture()
def empty():
    return DeflationSet.empty(4)


@pytest.fixture()
def one_accepted():
    return DeflationSet(U=np.eye(4)[:, :1], eigenvalues=[3.0], residual_norms=[1e-9])


def test_initial_shift(empty, one_accepted):
    fixed = ShiftStrategy(sigma0=2.0)
    prev_eig = ShiftStrategy(variant=ShiftVariant.PREV_EIG, sigma0=2.0, offset=-0.1)
    assert fixed.initial_shift(one_accepted) == 2.0
    assert prev_eig.initial_shift(empty) == 2.0
    assert prev_eig.initial_shift(one_accepted) == pytest.approx(2.9, rel=1e-15)


def test_fixed_shift_never_moves(one_accepted):
    update = update_shift(ShiftStrategy(sigma0=1.0), 1.0, state([4.0, 5.0], [0.0, 0.0]), [4.5], one_accepted)
    assert update.sigma == 1.0
    assert not update.switched


def test_prev_eig_follows_last_eigenvalue(empty, one_accepted):
    strategy = ShiftStrategy(variant=ShiftVariant.PREV_EIG, sigma0=1.0)
    assert update_shift(strategy, 1.0, state([4.0], [0.1]), [4.5], empty).sigma == 1.0
    assert update_shift(strategy, 1.0, state([4.0], [0.1]), [4.5], one_accepted).sigma == 3.0


def test_dynamic_switch(empty):
    """
    Check that a stagnating smallest Ritz value with a small residual moves the
    shift halfway to it and tightens the inner tolerance to eta.
    """
    strategy = ShiftStrategy(variant=ShiftVariant.DYNAMIC)
    update = update_shift(strategy, 0.0, state([1.0, 2.0], [0.01, 0.5]), [1.01, 2.1], empty)
    assert update.switched
    assert update.sigma == 0.5
    assert update.eta == pytest.approx(0.01, rel=1e-12)
    assert update.inner_tolerance == pytest.approx(0.01, rel=1e-12)


def test_dynamic_no_switch(empty):
    """
    Check that the shift stays when the Ritz value still moves, when the
    residual is large or when the candidate leaves the Ritz window.
    """
    strategy = ShiftStrategy(variant=ShiftVariant.DYNAMIC)
    moving = update_shift(strategy, 0.0, state([1.0, 2.0], [0.01, 0.5]), [1.5, 2.5], empty)
    assert not moving.switched and moving.sigma == 0.0
    large_residual = update_shift(strategy, 0.0, state([1.0, 2.0], [0.5, 0.5]), [1.01, 2.1], empty)
    assert not large_residual.switched
    outside = update_shift(strategy, 5.0, state([1.0, 2.0], [0.01, 0.5]), [1.01, 2.1], empty)
    assert not outside.switched and outside.sigma == 5.0
    single_column = update_shift(strategy, 0.0, state([1.0], [0.01]), [1.01], empty)
    assert not single_column.switched
    first_step = update_shift(strategy, 0.0, state([1.0, 2.0], [0.01, 0.5]), None, empty)
    assert first_step.eta is None


def test_tolerance_floor(empty):
    strategy = ShiftStrategy(variant=ShiftVariant.DYNAMIC, refine_tol_floor=1e-6)
    update = update_shift(strategy, 0.0, state([1.0, 2.0], [0.01, 0.5]), [1.0, 2.0], empty)
    assert update.switched
    assert update.inner_tolerance == 1e-6


def test_invalid_strategy():
    with pytest.raises(ValidationError):
        ShiftStrategy(sigma0=float("inf"))
    with pytest.raises(ValidationError):
        ShiftStrategy(variant="rayleigh")


def test_dynamic_switch_uses_wanted_columns(empty):
    """
    Check that the residual compared with res_threshold is the root sum square
    over the k wanted columns, so an unconverged second column blocks the
    switch.
    """
    strategy = ShiftStrategy(variant=ShiftVariant.DYNAMIC)
    stagnating = state([1.0, 2.0], [0.009, 4.954])
    first_column = update_shift(strategy, 0.0, stagnating, [1.01, 2.1], empty, k=1)
    assert first_column.switched
    both_columns = update_shift(strategy, 0.0, stagnating, [1.01, 2.1], empty, k=2)
    assert not both_columns.switched
    assert both_columns.sigma == 0.0
    converged = update_shift(strategy, 0.0, state([1.0, 2.0], [0.06, 0.07]), [1.01, 2.1], empty, k=2)
    assert converged.switched
