"""Exception hierarchy.

Two families matter to callers: ``InputError`` (bad data or parameters,
CLI exit code 2, HTTP 422) and ``NumericError`` (a computation that could
not be completed at the requested settings, CLI exit code 3, HTTP 409).
"""


class QFRerandError(Exception):
    """Base class for all package errors."""


class InputError(QFRerandError):
    """Invalid input data or parameters."""


class NumericError(QFRerandError):
    """A numeric procedure failed at the requested settings."""


# -- covariate model ------------------------------------------------------

class ZeroVarianceColumn(InputError):
    def __init__(self, name: str):
        self.name = name
        super().__init__(f"column {name!r} has zero sample variance")


class NonIntegerGroupSize(InputError):
    pass


class SingularSigma(InputError):
    pass


class LengthMismatch(InputError):
    pass


class GroupCountMismatch(InputError):
    pass


# -- criteria --------------------------------------------------------------

class DimensionMismatch(InputError):
    pass


class RankTooLarge(InputError):
    def __init__(self, k: int, rank: int):
        super().__init__(f"k={k} exceeds usable rank {rank}")
        self.k = k
        self.rank = rank


class NotPSD(InputError):
    pass


class ZeroBeta(InputError):
    pass


# -- threshold calibration ---------------------------------------------------

class TooFewDraws(InputError):
    pass


class DegenerateSpectrum(InputError):
    pass


class NotChiSquareCase(InputError):
    pass


# -- rerandomizer ------------------------------------------------------------

class BadCounts(InputError):
    pass


class MaxDrawsExceeded(NumericError):
    def __init__(self, max_draws: int):
        super().__init__(
            f"no acceptable assignment within {max_draws} draws; "
            "the threshold may be below the finite-sample minimum"
        )
        self.max_draws = max_draws


# -- diagnostics ---------------------------------------------------------------

class TooFewAccepted(NumericError):
    pass


class ZeroEta(InputError):
    pass


class NotPCACriterion(InputError):
    pass


class MissingOutcomeModel(InputError):
    pass


class NuEstimationFailed(NumericError):
    pass


# -- inference ----------------------------------------------------------------

class BracketNotFound(NumericError):
    pass


class DegenerateOutcomes(InputError):
    pass


# -- cli / io -------------------------------------------------------------------

class SchemaViolation(InputError):
    pass
