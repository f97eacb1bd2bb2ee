class ConfigError(ValueError):
    """Invalid search-space, loss or experiment configuration."""


class DimensionError(ValueError):
    """Input tensors with incompatible shapes."""


class NonFiniteLossError(FloatingPointError):
    """A loss or gradient became NaN/inf during optimization."""

    def __init__(self, message, step=None, value=None, context=None):
        super().__init__(message)
        self.step = step
        self.value = value
        self.context = context


class CheckpointError(RuntimeError):
    """Missing, corrupt or mismatched checkpoint."""


class IllConditionedWarning(RuntimeWarning):
    """The Gauss-Newton correction denominator fell below its safeguard."""
