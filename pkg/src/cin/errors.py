"""Exception hierarchy shared across the package."""


class CINError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CINError, ValueError):
    pass


class RankError(DimensionError):
    pass


class NonFiniteError(CINError, ValueError):
    """A value became NaN or infinite."""


class ContractError(CINError, RuntimeError):
    pass


class ConfigError(CINError, ValueError):
    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DataError(CINError, ValueError):
    pass


class DivergenceError(CINError, FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"training diverged: {term} = {value}")
        self.term = term
        self.value = value


class CheckpointError(CINError, IOError):
    pass
