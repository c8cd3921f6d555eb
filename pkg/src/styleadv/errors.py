"""Exception hierarchy shared by every module."""


class StyleAdvError(Exception):
    pass


class ShapeError(StyleAdvError, ValueError):
    pass


class DomainError(StyleAdvError, ValueError):
    """Math-domain violation (log/sqrt of a negative, non-finite probe value)."""


class ContractError(StyleAdvError, ValueError):
    pass


class NumericsError(StyleAdvError, ArithmeticError):
    """A loss or gradient went NaN/Inf."""


class FormatError(StyleAdvError, ValueError):
    pass


class ConfigError(StyleAdvError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
