"""Exception types raised across the package."""


class SoftPruneError(Exception):
    pass


class DimensionError(SoftPruneError, ValueError):
    """Tensor shapes do not line up."""


class InputError(SoftPruneError, ValueError):
    """An argument is outside its valid domain."""


class ConfigError(SoftPruneError, ValueError):
    pass


class StateError(SoftPruneError, RuntimeError):
    """Object is in the wrong state for the requested operation."""


class UnsupportedError(SoftPruneError, NotImplementedError):
    pass


class ParseError(SoftPruneError, ValueError):
    pass


class RunError(SoftPruneError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
