"""Exception hierarchy shared by every service and the CLI exit-code mapping."""


class ForensicsError(Exception):
    exit_code = 2


class TopologyError(ForensicsError, ValueError):
    pass


class CalibrationError(ForensicsError, ValueError):
    pass


class FeatureError(ForensicsError, ValueError):
    pass


class LeakageError(ForensicsError, ValueError):
    """A holdout backend reached a code path that must never see it."""


class MetricError(ForensicsError, ValueError):
    pass


class SchemaError(ForensicsError):
    exit_code = 3


class NumericalError(ForensicsError, ArithmeticError):
    exit_code = 4


EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ForensicsError):
        return exc.exit_code
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (FloatingPointError, ArithmeticError)):
        return EXIT_NUMERICAL
    return EXIT_USAGE
