"""Exception types.  Each maps to a stable CLI exit code."""


class RpnAugError(Exception):
    exit_code = 1


class ConfigError(RpnAugError, ValueError):
    exit_code = 2


class DimensionError(RpnAugError, ValueError):
    exit_code = 2


class PermutationError(RpnAugError, ValueError):
    exit_code = 2


class DataError(RpnAugError):
    exit_code = 3


class ParseError(DataError, ValueError):
    """Malformed input; ``location`` is a line number or byte offset."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class NumericError(RpnAugError, ArithmeticError):
    exit_code = 4


class ContractError(RpnAugError, RuntimeError):
    exit_code = 4
