"""Exception hierarchy shared by every module."""


class InfLoraError(Exception):
    pass


class InvalidInput(InfLoraError, ValueError):
    pass


class ShapeError(InfLoraError, ValueError):
    pass


class NumericalFailure(InfLoraError, ArithmeticError):
    pass


class StateError(InfLoraError, RuntimeError):
    pass


class DegenerateSubspace(InfLoraError):
    """No learning directions remain for a layer."""


class ConfigError(InfLoraError, ValueError):
    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class FormatError(InfLoraError):
    pass


class ParseError(InfLoraError, ValueError):
    def __init__(self, message, *, row=None, col=None, offset=None):
        self.row = row
        self.col = col
        self.offset = offset
        super().__init__(message)


class IoError(InfLoraError, OSError):
    pass
