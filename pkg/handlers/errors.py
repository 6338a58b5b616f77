"""Exception hierarchy shared by the library and the command line.

Every error carries the process exit code the CLI maps it to.
"""

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_CHECKSUM = 5


class CbtError(Exception):
    exit_code = 1


class ConfigError(CbtError):
    exit_code = EXIT_CONFIG


class RunLockedError(ConfigError):
    pass


class RunExistsError(ConfigError):
    pass


class DataError(CbtError):
    exit_code = EXIT_DATA


class ShapeError(DataError, ValueError):
    pass


class CheckpointFormatError(DataError):
    pass


class NumericError(CbtError, ArithmeticError):
    exit_code = EXIT_NUMERIC

    def __init__(self, message, epoch=None, batch=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class ChecksumMismatchError(CbtError):
    exit_code = EXIT_CHECKSUM

    def __init__(self, path, expected, actual):
        super().__init__(f"Checksum mismatch for {path}: expected {expected}, got {actual}")
        self.path = path
        self.expected = expected
        self.actual = actual
