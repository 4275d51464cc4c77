"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class PruneError(Exception):
    exit_code = 1


class ConfigError(PruneError, ValueError):
    exit_code = 2


class InputError(PruneError, ValueError):
    exit_code = 2


class DimensionError(PruneError, ValueError):
    exit_code = 2


class ContractError(PruneError, ValueError):
    exit_code = 2


class FormatError(PruneError):
    exit_code = 3

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(PruneError, ArithmeticError):
    exit_code = 4


class TrainingError(NumericError):
    pass


class VerificationError(PruneError):
    exit_code = 5
