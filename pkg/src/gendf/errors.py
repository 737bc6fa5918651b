class ConfigError(ValueError):
    """Invalid configuration or hyperparameter."""


class DegenerateError(ValueError):
    """Input has no well-defined answer (single-class batch, zero direction, ...)."""
