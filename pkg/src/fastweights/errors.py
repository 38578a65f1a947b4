class FastWeightsError(Exception):
    """Base class for library errors."""


class ShapeMismatch(FastWeightsError, ValueError):
    pass


class RecordMismatch(FastWeightsError, ValueError):
    pass


class EmptySequence(FastWeightsError, ValueError):
    pass


class StrategyUnsupported(FastWeightsError, ValueError):
    pass


class ActionOutOfRange(FastWeightsError, ValueError):
    pass


class SpecInvalid(FastWeightsError, ValueError):
    pass


class TokenOutOfRange(FastWeightsError, ValueError):
    pass


class EmptyMask(FastWeightsError, ValueError):
    pass


class NonFiniteGradient(FastWeightsError, FloatingPointError):
    pass
