"""Exception hierarchy shared across the package.

Each family maps to a distinct CLI exit code (see :data:`EXIT_CODES`).
"""


class GroupSurvError(Exception):
    """Base class for all package errors."""


class ArgumentError(GroupSurvError, ValueError):
    """Bad argument values or shapes."""


class ConfigError(ArgumentError):
    """Invalid configuration object or config file."""


class CorruptFileError(GroupSurvError, OSError):
    """A feature file disagrees with its sidecar header."""


class InvariantError(GroupSurvError, RuntimeError):
    """An internal data structure violates its invariants."""


class NumericError(GroupSurvError, ArithmeticError):
    """Non-finite values encountered (diverged training, bad inputs)."""


class UndefinedMetricError(NumericError):
    """A metric has no defined value for the given cohort."""


class LoadError(GroupSurvError, OSError):
    """A checkpoint does not match the configuration it is loaded against."""


EXIT_CODES = {
    "argument": 2,
    "io": 3,
    "numeric": 4,
}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ArgumentError):
        return EXIT_CODES["argument"]
    if isinstance(exc, NumericError):
        return EXIT_CODES["numeric"]
    if isinstance(exc, (OSError, InvariantError)):
        return EXIT_CODES["io"]
    return 1
