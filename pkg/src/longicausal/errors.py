"""Exception hierarchy.

Two families matter to callers: :class:`DataError` (bad or inconsistent
input) and :class:`NumericalError` (the numbers refused to cooperate). The
CLI maps them to exit codes 2 and 3 respectively.
"""

from __future__ import annotations


class LongiCausalError(Exception):
    """Base class for every error raised by this package."""


class DataError(LongiCausalError):
    pass


class NumericalError(LongiCausalError):
    pass


# -- data errors -------------------------------------------------------------


class MissingColumn(DataError):
    def __init__(self, column: str):
        super().__init__(f"missing column: {column!r}")
        self.column = column


class NonFiniteValue(DataError):
    def __init__(self, row: int, col: str):
        super().__init__(f"non-finite value at row {row}, column {col!r}")
        self.row = row
        self.col = col


class NonIncreasingTimes(DataError):
    def __init__(self, ident):
        super().__init__(f"measurement times not strictly increasing for id {ident!r}")
        self.ident = ident


class MissingFile(DataError, FileNotFoundError):
    pass


class TooFewRows(DataError):
    pass


class DimensionMismatch(DataError, ValueError):
    pass


class BadTimeIndex(DataError, IndexError):
    pass


class ZeroPeriod(DataError, ValueError):
    pass


class NonPositiveDenominator(DataError, ValueError):
    pass


class UnknownPreset(DataError, KeyError):
    pass


class IncompleteGrid(DataError):
    pass


class NonPositiveWeights(DataError):
    pass


class DegenerateInstrument(DataError):
    pass


class MissingOutcomeBlock(DataError, KeyError):
    pass


class UnknownConfigKey(DataError, KeyError):
    pass


# -- numerical errors --------------------------------------------------------


class RankDeficient(NumericalError):
    def __init__(self, columns):
        cols = list(columns)
        super().__init__(f"design matrix is rank deficient; dependent columns: {cols}")
        self.columns = cols


class SingularMatrix(NumericalError):
    pass


class SingularJacobian(SingularMatrix):
    pass


class SingularMomentSystem(SingularMatrix):
    pass


class NonFiniteMoment(NumericalError):
    pass


class NotPSD(NumericalError):
    pass


class DegenerateSD(NumericalError):
    pass


class NoConvergence(NumericalError):
    pass


class UnderIdentified(NumericalError):
    pass


class McAborted(NumericalError):
    pass


# -- warnings ----------------------------------------------------------------


class DegenerateExposureWarning(UserWarning):
    """An exposure column was residualized to (numerically) zero."""


class BalanceNotReachedWarning(UserWarning):
    """Exact-balance calibration fell back to the Gaussian ML weights."""


class SingularOmegaWarning(UserWarning):
    """Moment covariance was singular; a ridge was added before inversion."""
