"""Exception hierarchy.

Every error carries a stable ``category`` string used by the CLI for exit
codes and machine-readable diagnostics.
"""


class HERWError(Exception):
    category = "error"


class InvalidInputError(HERWError, ValueError):
    category = "invalid-input"


class ParseError(InvalidInputError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConsistencyError(ParseError):
    category = "parse-consistency"


class DegeneracyError(HERWError):
    category = "degenerate"


class SolverError(HERWError):
    """Dual solver failed to converge; ``last_iterate`` holds the final (y, X, S)."""

    category = "solver"

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class RecoveryError(SolverError):
    category = "solver-recovery"


class UncertifiedError(HERWError):
    category = "uncertified"
