"""Exception hierarchy shared across the package."""


class LipnetError(Exception):
    """Base class for all errors raised by lipnet."""


class DimensionError(LipnetError, ValueError):
    pass


class GeometryError(LipnetError, ValueError):
    pass


class CacheError(LipnetError, RuntimeError):
    pass


class InitError(LipnetError, ValueError):
    pass


class NumericError(LipnetError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, step: int, message: str = "loss is not finite"):
        super().__init__(f"{message} at step {step}")
        self.step = step


class FormatError(LipnetError, ValueError):
    """Malformed or unsupported serialised document."""


class ConfigError(LipnetError, ValueError):
    pass
