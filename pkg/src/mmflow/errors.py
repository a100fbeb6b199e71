"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid hyperparameters or configuration values."""


class DegenerateMaskError(ValueError):
    """Every position of a sample is masked out; the sample should have been dropped."""


class NumericFailure(RuntimeError):
    """A non-finite value appeared during evaluation.

    ``where`` names the stage (layer index, sampler step, ...) for diagnostics.
    """

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where
