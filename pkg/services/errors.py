"""Exception hierarchy shared by every service. Each error carries the CLI exit code."""


class PcgError(Exception):
    exit_code = 1


class ConfigurationError(PcgError, ValueError):
    exit_code = 2


class DataError(PcgError, ValueError):
    exit_code = 3


class NumericFailure(PcgError, ArithmeticError):
    exit_code = 4


class GraphError(PcgError, RuntimeError):
    exit_code = 4


class ShapeError(PcgError, ValueError):
    exit_code = 2
