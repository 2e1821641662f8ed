"""
Error hierarchy with stable codes and CLI exit statuses
"""
from typing import Optional


class EnvelopeError(Exception):
    """Base error. `code` is stable across releases and printed by the CLI."""

    exit_status: int = 1

    def __init__(self, message: str = "", code: Optional[str] = None):
        super().__init__(message)
        self.code = code or type(self).__name__

    def __str__(self):
        message = super().__str__()
        return message or self.code


class ConfigError(EnvelopeError):
    exit_status = 2


class InvalidConfig(ConfigError):
    pass


class DataError(EnvelopeError):
    exit_status = 3


class MissingColumn(DataError):
    pass


class NonNumericCell(DataError):
    pass


class AllMissingColumn(DataError):
    pass


class AllMissingRow(DataError):
    pass


class DataFileNotFound(DataError):
    pass


class EmptyTable(DataError):
    pass


class TooFewCompleteRows(DataError):
    pass


class DimensionTooSmallForMechanism(DataError):
    pass


class NumericalError(EnvelopeError):
    exit_status = 4


class NotSymmetric(NumericalError):
    pass


class NotPSD(NumericalError):
    pass


class NotPD(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NotOrthonormal(NumericalError):
    pass


class ShapeMismatch(NumericalError):
    pass


class SingularObservedBlock(NumericalError):
    pass


class SingularA3(NumericalError):
    pass


class SingularMkPlusUk(NumericalError):
    pass


class AllReplicatesFailed(NumericalError):
    pass
