"""Exception types shared across the library."""


class CoreselectError(Exception):
    """Base class for all library errors."""


class ParseError(CoreselectError):
    """Malformed input file; carries the 1-based line number."""

    def __init__(self, line_no: int, message: str):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class SolverError(CoreselectError):
    """An inner solver failed outright (as opposed to merely not converging)."""


class IndefiniteSystemError(SolverError):
    """CG iterates produced NaN/Inf; the operator is likely not PSD.

    Retrying with a positive damping value usually fixes this.
    """


class NeumannDivergenceError(SolverError):
    """Neumann partial sums are growing; the scale alpha is too large."""


class DegenerateKernelError(CoreselectError):
    """All landmark eigenvalues fell below the floor."""


class SparsityError(CoreselectError):
    """Regularized selection could not reach the requested support size."""

    def __init__(self, message: str, achieved_support: int):
        self.achieved_support = achieved_support
        super().__init__(message)
