"""Exception types raised across the package."""


class SelfTrainError(Exception):
    """Base class for all package errors."""


class ConfigError(SelfTrainError, ValueError):
    """Invalid configuration; ``path`` names the offending field when known."""

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ShapeError(SelfTrainError, ValueError):
    def __init__(self, message, layer_index=None):
        self.layer_index = layer_index
        prefix = f"layer {layer_index}: " if layer_index is not None else ""
        super().__init__(prefix + message)


class NumericOverflowError(SelfTrainError, FloatingPointError):
    def __init__(self, layer_index):
        self.layer_index = layer_index
        super().__init__(f"non-finite activation at layer {layer_index}")


class NonFiniteGradientError(SelfTrainError, FloatingPointError):
    def __init__(self, layer_index, name):
        self.layer_index = layer_index
        self.name = name
        super().__init__(f"non-finite gradient for layer {layer_index} param {name!r}; step aborted")


class TraceMismatchError(SelfTrainError, ValueError):
    pass


class InvalidDistributionError(SelfTrainError, ValueError):
    pass


class IdxParseError(SelfTrainError, ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class UndefinedNormalizationError(SelfTrainError, ZeroDivisionError):
    pass


class DivergenceError(SelfTrainError, RuntimeError):
    """Training loss went non-finite. ``last_good`` holds the last finite model."""

    def __init__(self, message, last_good=None, step=None):
        self.last_good = last_good
        self.step = step
        super().__init__(message)
