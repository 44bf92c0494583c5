"""Exception hierarchy shared by every module."""


class WeaveSimError(Exception):
    pass


class DimensionError(WeaveSimError, ValueError):
    """Shapes of matrices, shards or weights do not line up."""


class NumericError(WeaveSimError, ValueError):
    """Non-finite values were handed to a numeric kernel."""


class ConfigurationError(WeaveSimError, ValueError):
    """Invalid configuration, e.g. a world size below two."""


class ContractError(WeaveSimError, ValueError):
    """A caller broke an operation's precondition."""


class CalibrationError(WeaveSimError, ValueError):
    """A calibration table cannot be fitted."""


class TraceParseError(WeaveSimError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
