"""Exception hierarchy shared by every module.

Each class carries the process exit code the command line maps it to.
"""


class NmtAugError(Exception):
    exit_code = 1


class ConfigError(NmtAugError, ValueError):
    exit_code = 1


class DataError(NmtAugError, ValueError):
    exit_code = 2


class CheckpointError(DataError):
    pass


class NumericalError(NmtAugError, FloatingPointError):
    exit_code = 3
