"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with an operation."""


class ConfigError(ValueError):
    """A model, dataset or training configuration is invalid."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class NearKinkError(RuntimeError):
    """Evaluation point is too close to a ReLU kink or a channel-max tie.

    Finite differences are unreliable there; callers should resample.
    """


class DataFormatError(ValueError):
    """A dataset file on disk is missing or malformed."""
