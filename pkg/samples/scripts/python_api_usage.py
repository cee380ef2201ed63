import numpy as np

from psdid.bounds import kappa, sharpness_probe, single_step_factor
from psdid.linalg import Pencil
from psdid.oracle import QualityRecorder, dense_oracle, effective_form, quality_epsilon
from psdid.preconditioner import Preconditioner, PreconditionerSpec, PreconditionerVariant
from psdid.problems import Slit, SlitRectangleSpec, build_slit_laplacian
from psdid.shifts import ShiftStrategy, ShiftVariant
from psdid.solver import RunConfig, multi_run
from psdid.suites import get_suite, registered_suites
from psdid.verification import verify_trace

# This script illustrates the main functions of psdid: build a test problem,
# compute its smallest eigenpairs, and check the solver trace against the
# convergence bounds.

spec = SlitRectangleSpec(
    width=1.5,
    height=1.0,
    h=1 / 16,
    slits=[Slit(x=0.5, y0=0.45, y1=0.55), Slit(x=1.0, y0=0.45, y1=0.55)],
)
pencil, grid = build_slit_laplacian(spec)
print(f"n = {pencil.n}, {grid.removed_count} slit nodes removed")

# Four eigenpairs, two per run, with a block of three and exact shift-invert
# at sigma = 10 and then at the last accepted eigenvalue
cfg = RunConfig(
    k=2,
    block_size=3,
    shift=ShiftStrategy(variant=ShiftVariant.PREV_EIG, sigma0=10.0),
    preconditioner=PreconditionerSpec(variant=PreconditionerVariant.EXACT_SHIFT_INVERT),
    tolerance=1e-8,
    seed=0,
)
result = multi_run(pencil, 4, cfg)
print(result.deflation.eigenvalues)
print(result.trace.to_frame().head())

# The pencil is small: solve it densely and check every step of the trace
oracle = dense_oracle(pencil)
sigma = result.runs[0].sigma
K = Preconditioner.build(cfg.preconditioner.with_shift(sigma), pencil)
quality = quality_epsilon(effective_form(K, oracle, 1, sigma))
print(f"epsilon of exact shift-invert: {quality.epsilon:.2e}")
report = verify_trace(result.trace, oracle, quality)
print(report.summary())

# Inexact inner solves: record the quality of every step while solving
inexact = cfg.model_copy(
    update={
        "shift": ShiftStrategy(sigma0=10.0),
        "preconditioner": PreconditionerSpec(
            variant=PreconditionerVariant.INNER_KRYLOV, tolerance=0.1
        ),
    }
)
recorder = QualityRecorder(oracle, pencil)
inexact_result = multi_run(pencil, 2, inexact, recorder)
print(verify_trace(inexact_result.trace, oracle).summary())

# Convergence factor of a single step and how close a step gets to it
factor = single_step_factor(kappa(1.0, 2.0, 10.0, 0.0), 0.0)
diagonal = Pencil.from_dense(np.diag(np.arange(1.0, 11.0)))
probe = sharpness_probe(dense_oracle(diagonal), diagonal, 1, 0.0, 0.0, [1e-2, 1e-8])
print(factor, probe.relative_factors)

# Acceptance suites are registered by name
print(registered_suites())
print(get_suite("epsilon-identity")().run().to_text())
