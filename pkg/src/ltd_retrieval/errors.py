"""Exception hierarchy shared by every module of the package."""


class LTDError(Exception):
    """Base class for all errors raised by ltd_retrieval."""


class ZeroNorm(LTDError, ValueError):
    """A vector that must be normalized has (numerically) zero length."""


class LengthMismatch(LTDError, ValueError):
    pass


class ShapeMismatch(LTDError, ValueError):
    pass


class NonFinite(LTDError, ValueError):
    pass


class BatchTooSmall(LTDError, ValueError):
    pass


class NoForwardCache(LTDError, RuntimeError):
    """backward() was called without a matching forward()."""


class EmptyCaption(LTDError, ValueError):
    pass


class TokenOutOfRange(LTDError, ValueError):
    pass


class NonUnitNorm(LTDError, ValueError):
    pass


class EmptyAccumulator(LTDError, RuntimeError):
    pass


class SpecInvalid(LTDError, ValueError):
    pass


class ParseError(LTDError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SchemaVersionMismatch(LTDError, ValueError):
    pass


class EmptyRelevance(LTDError, ValueError):
    pass


class ConfigInvalid(LTDError, ValueError):
    pass


class NonFiniteLoss(LTDError, FloatingPointError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state or {}


class DimMismatch(LTDError, ValueError):
    pass
