"""Exception classes shared across the package."""


class RepquantError(Exception):
    """Base class for all errors raised by repquant."""


class ContractError(RepquantError, ValueError):
    """Arguments violate a shape or dimension contract."""


class ConfigurationError(RepquantError, ValueError):
    """Invalid configuration value or unsatisfiable request."""


class NumericFault(RepquantError, FloatingPointError):
    """NaN or Inf encountered in a parameter block or gradient."""


class FormatError(RepquantError):
    """File does not carry the expected magic or version."""


class CorruptionError(FormatError):
    """File header is valid but the payload is truncated or inconsistent."""


class DataError(RepquantError, ValueError):
    """File parses but its content is invalid (NaN frames, bad labels, ...)."""


class UndefinedMetricError(RepquantError, ArithmeticError):
    """Metric is undefined for the given input (e.g. zero entropy)."""
