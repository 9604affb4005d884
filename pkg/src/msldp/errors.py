"""Exception hierarchy shared across the toolkit.

The command line maps these onto exit codes: configuration and parse
problems exit with 1, numerical failures with 2.
"""


class MsldpError(Exception):
    """Base class for all library errors."""


class ConfigError(MsldpError):
    """Bad run configuration (missing section, unknown key, bad value)."""


class ExprError(MsldpError):
    """Base class for expression-layer errors."""


class ParseError(ExprError):
    """Syntax error in an expression source string.

    Carries the byte offset into the source and the set of token kinds
    that would have been accepted at that point.
    """

    def __init__(self, source, offset, expected, found):
        self.source = source
        self.offset = offset
        self.expected = frozenset(expected)
        self.found = found
        line = source.count("\n", 0, offset) + 1
        col = offset - (source.rfind("\n", 0, offset) + 1) + 1
        self.line = line
        self.col = col
        exp = ", ".join(sorted(self.expected))
        msg = f"{line}:{col}: expected one of {{{exp}}}, got {found} (offset {offset})"
        super().__init__(msg)


class EvalError(ExprError):
    """Unbound identifier or domain error during checked evaluation."""


class DimensionError(MsldpError):
    """Inconsistent dimensions in a model specification."""


class NondegeneracyError(MsldpError):
    """sigma*sigma^T fails the minimum-eigenvalue check at a sample point."""


class SolverError(MsldpError):
    """A linear/eigenvalue/root solve failed or produced an invalid result."""


class BracketError(MsldpError):
    """A 1-D search bracket could not be established."""


class StepSizeError(MsldpError):
    """The requested integrator step violates the stability rule."""


class NonFiniteError(MsldpError):
    """A simulated state or Monte Carlo sample became non-finite."""
