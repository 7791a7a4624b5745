"""Exception types shared across the package."""


class CVFNetError(Exception):
    pass


class DimensionError(CVFNetError, ValueError):
    """Operand shapes disagree along some axis."""


class ConfigurationError(CVFNetError, ValueError):
    """A configuration value (or combination of values) cannot work."""


class ContractError(CVFNetError, ValueError):
    """A caller broke an operation precondition."""


class DataError(CVFNetError, ValueError):
    """Input data (files, clouds, labels) is missing or malformed."""


class DegeneratePointError(DataError):
    pass


class EmptyImageError(DataError):
    pass


class DomainError(CVFNetError, ValueError):
    pass


class TrainingDivergenceError(CVFNetError, FloatingPointError):
    pass


class UndefinedMetricError(CVFNetError, ValueError):
    pass


class ParseError(DataError):
    def __init__(self, message, line=None, path=None):
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}" if where else f"line {line}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line = line
        self.path = path


class CheckpointMismatchError(CVFNetError, ValueError):
    pass
