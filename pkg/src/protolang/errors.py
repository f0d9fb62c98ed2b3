"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration or inputs detected before any work is done."""


class EpisodeError(ValueError):
    """An episode cannot be built from the requested split."""


class ShapeError(ValueError):
    """Input tensor does not match the configured layout."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
