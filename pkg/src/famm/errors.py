"""Exception hierarchy.

Input problems derive from :class:`InputError` (also a ``ValueError``);
numerical failures derive from :class:`NumericalError`. The CLI maps the two
families onto distinct exit codes.
"""


class FammError(Exception):
    """Base class for all package errors."""


class InputError(FammError, ValueError):
    """Malformed or inconsistent user input."""


class NumericalError(FammError, ArithmeticError):
    """A computation could not be carried out reliably."""


# data model
class DuplicateObservation(InputError):
    pass


class MissingCovariate(InputError):
    pass


class InvalidValue(InputError):
    pass


class UnknownCurve(InputError):
    pass


class AlreadyCentered(InputError):
    pass


# bases and penalties
class InvalidBasisSize(InputError):
    pass


class InvalidPenaltyOrder(InputError):
    pass


class InvalidPenalty(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class GridTooSmall(InputError):
    pass


class BasisRangeError(InputError):
    pass


# terms
class EmptyWindow(InputError):
    pass


class MissingBasis(InputError):
    pass


class DegenerateEigenvalue(InputError):
    pass


class GridMismatch(InputError):
    pass


class UnknownTerm(InputError):
    pass


# fpca
class TooFewCurves(InputError):
    pass


class EmptyCurve(InputError):
    pass


class DegenerateCovariance(NumericalError):
    pass


# constraints
class ConstraintNotApplicable(InputError):
    pass


class OverConstrained(NumericalError):
    pass


# solver
class RankDeficient(NumericalError):
    """Penalized normal equations are singular.

    ``null_directions`` holds an orthonormal basis (columns) of the
    unidentified coefficient directions.
    """

    def __init__(self, message, null_directions=None):
        super().__init__(message)
        self.null_directions = null_directions


class NoRandomStructure(NumericalError):
    pass


# simulation / config
class UnknownScenario(InputError):
    pass


class ParseError(InputError):
    """Config or CSV parse failure; ``location`` names where it happened."""

    def __init__(self, message, location=None):
        if location is not None:
            message = f"{location}: {message}"
        super().__init__(message)
        self.location = location


class ConflictError(InputError):
    pass
