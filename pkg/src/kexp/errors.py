"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class KexpError(Exception):
    exit_code = 1


class ContractError(KexpError, ValueError):
    """Bad argument shape/dimension or violated precondition."""

    exit_code = 2


class DegenerateDataError(KexpError, ValueError):
    exit_code = 3


class NumericError(KexpError, FloatingPointError):
    exit_code = 3


class StepSizeError(NumericError):
    pass


class NuDivergenceError(NumericError):
    """exp(nu) overflowed inside the inner loop."""


class ResourceError(KexpError, MemoryError):
    exit_code = 4


class UnsupportedError(KexpError, NotImplementedError):
    exit_code = 2
