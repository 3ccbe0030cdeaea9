"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid hyperparameters, shapes or dataset parameters."""


class FormatError(ValueError):
    """A dataset or checkpoint file is malformed, truncated or from another version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite or exploding quantity."""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class CollapseError(RuntimeError):
    """Contrastive pretraining collapsed to a constant embedding."""
