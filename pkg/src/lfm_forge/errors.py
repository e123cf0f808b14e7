"""Exception hierarchy shared across the package."""


class ForgeError(Exception):
    """Base class for every error raised by lfm_forge."""


class DimensionError(ForgeError, ValueError):
    pass


class ConfigError(ForgeError, ValueError):
    pass


class DomainError(ForgeError, ValueError):
    pass


class NumericError(ForgeError, ArithmeticError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CapacityError(ForgeError, RuntimeError):
    pass


class InputError(ForgeError, ValueError):
    pass


class CompatibilityError(ForgeError, ValueError):
    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class DegenerateInputError(ForgeError, ValueError):
    pass


class ParseError(InputError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
