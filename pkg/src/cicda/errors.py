"""Exception types raised across the package."""


class CICDAError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(CICDAError, ValueError):
    pass


class SingularMatrix(CICDAError, ArithmeticError):
    pass


class SingularConfusion(SingularMatrix):
    """Confusion matrix of the proxy classifier cannot be inverted."""


class EmptyInput(CICDAError, ValueError):
    pass


class EmptyBatch(EmptyInput):
    pass


class EmptyDataset(EmptyInput):
    pass


class EmptyRegion(EmptyInput):
    pass


class DegenerateClass(CICDAError, ValueError):
    pass


class UnknownPreset(CICDAError, KeyError):
    pass


class ConfigError(CICDAError, ValueError):
    pass
