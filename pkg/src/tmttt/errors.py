"""Exception hierarchy.

ConfigError and DataError are the two families the CLI maps to exit codes 1 and 2.
"""


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


class DimensionError(ConfigError):
    pass


class UnsupportedKernelError(ConfigError):
    pass


class ModeError(ConfigError):
    pass


class RankError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class EmptyParameterError(ValueError):
    pass


class OptimizerError(RuntimeError):
    pass


class LoadError(DataError):
    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(DataError):
    pass
