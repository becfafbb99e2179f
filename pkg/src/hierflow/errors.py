"""Exception hierarchy. Each family maps to a CLI exit code."""


class HierflowError(Exception):
    exit_code = 1


class ConfigError(HierflowError, ValueError):
    """Invalid configuration or usage."""

    exit_code = 2


class DataError(HierflowError, ValueError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class ContractError(HierflowError, RuntimeError):
    """An API precondition was violated by the caller."""

    exit_code = 2


class DimensionError(ContractError):
    """Tensor shapes do not line up."""


class GraphError(DataError):
    """Hierarchy structure is inconsistent."""


class NumericAbort(HierflowError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 4
