"""Exception hierarchy shared across the package.

Grouped by what the caller can do about them: input/usage problems,
model preconditions, and numerical failures. The CLI maps these groups
to exit codes (2, 3, 4 respectively).
"""


class MfdaError(Exception):
    """Base class for all package errors."""


# -- input / usage ----------------------------------------------------------


class InvalidGridError(MfdaError, ValueError):
    """Grid points or quadrature weights violate their invariants."""


class GridMismatchError(MfdaError, ValueError):
    """Two curves (or a curve and a fit) do not share the same grid."""


class InvalidParameterError(MfdaError, ValueError):
    """A user-supplied parameter is out of its admissible range."""


class MissingMeanError(MfdaError, KeyError):
    """A row's measure index has no supplied mean curve."""


class InvalidBasisError(MfdaError, ValueError):
    """A user-supplied basis is not orthonormal under the grid quadrature."""


class ParseError(MfdaError, ValueError):
    """A data or spec file could not be parsed; message carries the location."""


class DuplicateKeyError(MfdaError, ValueError):
    """Duplicate (subject, measure, replicate, channel, t) record in a file."""


class IncompleteCurveError(MfdaError, ValueError):
    """A curve group does not cover the shared grid."""


# -- model preconditions ----------------------------------------------------


class EmptyDataError(MfdaError, ValueError):
    """An operation received an empty curve set or empty group."""


class InsufficientDataError(MfdaError, ValueError):
    """Not enough rows, measures, or replicates for the requested fit."""


class UnbalancedDesignError(MfdaError, ValueError):
    """The nested index set is not complete and rectangular."""


class ComponentMismatchError(MfdaError, ValueError):
    """Score matrices do not share the same component layout."""


# -- numerical failures -----------------------------------------------------


class AsymmetricMatrixError(MfdaError, ValueError):
    """A matrix expected to be symmetric is not, beyond tolerance."""


class DimensionError(MfdaError, ValueError):
    """Non-conformable matrix or vector dimensions."""


class DegenerateSpectrumError(MfdaError, ValueError):
    """All eigenvalues are zero; no component can be selected."""


class SingularSystemError(MfdaError, ValueError):
    """A score system is singular (zero noise and collinear basis)."""


class UndefinedIccError(MfdaError, ValueError):
    """The ICC denominator vanishes."""


class UndefinedCorrelationError(MfdaError, ValueError):
    """A correlation is undefined (zero-variance input)."""
