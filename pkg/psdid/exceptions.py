EXIT_NUMERICAL_FAILURE = 4
EXIT_CONFIG_ERROR = 3
EXIT_UNCONVERGED = 2
EXIT_VERIFICATION_FAILED = 1


class PsdidError(Exception):
    """
    Base exception of the package. The exit code is used by the command line
    interface when the exception escapes a command.
    """

    exit_code = EXIT_NUMERICAL_FAILURE


class ConfigError(PsdidError):
    """
    Exception raised when an experiment configuration can't be loaded or is
    invalid.
    """

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, file: str, reason: str):
        super().__init__()
        self.file = file
        self.reason = reason

    def __str__(self):
        return f"Invalid configuration {self.file}: {self.reason}"


class DimensionMismatchError(PsdidError, ValueError):
    """
    Exception raised when operands of a linear algebra kernel have incompatible
    dimensions.
    """

    def __init__(self, expected: int, got: int, what: str = "vector"):
        super().__init__()
        self.expected = expected
        self.got = got
        self.what = what

    def __str__(self):
        return f"Dimension mismatch for {self.what}: expected {self.expected}, got {self.got}."


class ZeroVectorError(PsdidError, ValueError):
    """
    Exception raised when a Rayleigh quotient or a normalisation is asked for a
    zero vector.
    """


class NotSymmetricError(PsdidError, ValueError):
    """
    Exception raised when a matrix expected to be symmetric is not, within the
    relative tolerance.
    """

    def __init__(self, asymmetry: float):
        super().__init__()
        self.asymmetry = asymmetry

    def __str__(self):
        return f"Matrix is not symmetric (relative asymmetry {self.asymmetry:.3e})."


class DenseLimitError(PsdidError):
    """
    Exception raised when a dense computation is requested above the configured
    dense limit.
    """

    def __init__(self, n: int, limit: int):
        super().__init__()
        self.n = n
        self.limit = limit

    def __str__(self):
        return f"Dense size {self.n} exceeds the dense limit {self.limit}."


class JacobiSweepError(PsdidError):
    """
    Exception raised when the cyclic Jacobi eigensolver doesn't reach its
    off-diagonal tolerance within the sweep limit.
    """

    def __init__(self, sweeps: int, off_diagonal: float):
        super().__init__()
        self.sweeps = sweeps
        self.off_diagonal = off_diagonal

    def __str__(self):
        return (
            f"Jacobi eigensolver did not converge in {self.sweeps} sweeps "
            f"(off-diagonal mass {self.off_diagonal:.3e})."
        )


class EmptyBasisError(PsdidError):
    """
    Exception raised when every column of a block is dropped by the
    orthonormalisation rank reveal.
    """


class RankCollapseError(PsdidError):
    """
    Exception raised when a trial subspace has a smaller dimension than the
    number of Ritz pairs to select.
    """

    def __init__(self, available: int, requested: int):
        super().__init__()
        self.available = available
        self.requested = requested

    def __str__(self):
        return (
            f"Trial subspace rank collapsed: {self.available} directions available, "
            f"{self.requested} Ritz pairs requested."
        )


class InnerSolveError(PsdidError):
    """
    Exception raised when an inner linear solve doesn't converge. The achieved
    relative residual is kept.
    """

    def __init__(self, achieved_residual: float, tolerance: float, iterations: int):
        super().__init__()
        self.achieved_residual = achieved_residual
        self.tolerance = tolerance
        self.iterations = iterations

    def __str__(self):
        return (
            f"Inner solve stopped after {self.iterations} iterations with relative "
            f"residual {self.achieved_residual:.3e} > {self.tolerance:.3e}."
        )


class SingularShiftError(PsdidError):
    """
    Exception raised when the shifted matrix H - sigma S has a zero pivot.
    """

    def __init__(self, sigma: float, pivot_index: int):
        super().__init__()
        self.sigma = sigma
        self.pivot_index = pivot_index

    def __str__(self):
        return (
            f"H - {self.sigma} S is singular (zero pivot at row {self.pivot_index}); "
            "the shift equals an eigenvalue."
        )


class BandwidthError(PsdidError):
    """
    Exception raised when the bandwidth of the shifted matrix exceeds the cap of
    the banded factorization.
    """

    def __init__(self, bandwidth: int, cap: int):
        super().__init__()
        self.bandwidth = bandwidth
        self.cap = cap

    def __str__(self):
        return (
            f"Bandwidth {self.bandwidth} exceeds the cap {self.cap}; "
            "use the inner_krylov preconditioner instead."
        )


class NotPositiveDefiniteError(PsdidError):
    """
    Exception raised when S is found not to be positive definite.
    """


class IndefinitePreconditionerError(PsdidError):
    """
    Exception raised when a preconditioner quality is asked for an effective
    form that is not positive definite.
    """

    def __init__(self, alpha: float):
        super().__init__()
        self.alpha = alpha

    def __str__(self):
        return f"Effective form is not positive definite (smallest eigenvalue {self.alpha:.3e})."


class DomainError(PsdidError, ValueError):
    """
    Exception raised when a bound formula is evaluated outside of its domain.
    """


class InvalidGridError(PsdidError, ValueError):
    """
    Exception raised when a slit rectangle doesn't fit its mesh.
    """


class MatrixMarketError(PsdidError):
    """
    Exception raised when a Matrix Market file can't be read.
    """

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, file: str, reason: str):
        super().__init__()
        self.file = file
        self.reason = reason

    def __str__(self):
        return f"Invalid Matrix Market file {self.file}: {self.reason}"


class FingerprintMismatchError(PsdidError):
    """
    Exception raised when a trace or an oracle was produced for another pencil.
    """

    def __init__(self, expected: str, got: str):
        super().__init__()
        self.expected = expected
        self.got = got

    def __str__(self):
        return f"Pencil fingerprint mismatch: expected {self.expected}, got {self.got}."


class UnknownSuiteError(PsdidError):
    """
    Exception raised when an unregistered verification suite is requested.
    """

    exit_code = EXIT_CONFIG_ERROR

    def __init__(self, name: str, available):
        super().__init__()
        self.name = name
        self.available = list(available)

    def __str__(self):
        return f"Unknown suite {self.name}, available suites: {', '.join(self.available)}."
