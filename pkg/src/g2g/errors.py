"""Exception hierarchy. Each class carries the CLI exit code for its error class."""


class G2GError(Exception):
    exit_code = 1


class InvalidArgumentError(G2GError, ValueError):
    exit_code = 2


class InvalidLabelError(G2GError, ValueError):
    exit_code = 3


class PairingError(G2GError):
    exit_code = 4


class ConfigurationError(G2GError):
    exit_code = 5


class ContractViolationError(G2GError, ValueError):
    exit_code = 6


class CheckpointError(G2GError):
    exit_code = 7


class UndefinedMetricError(G2GError, ArithmeticError):
    exit_code = 8


class ReportParseError(G2GError):
    exit_code = 9


class NonFiniteLossError(G2GError, FloatingPointError):
    exit_code = 10


class RunLockedError(G2GError):
    exit_code = 11
