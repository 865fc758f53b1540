"""Package-wide exception types."""


class ConfigurationError(RuntimeError):
    """Raised when an on-disk layout or a configuration value makes a run impossible."""


class DegeneratePriorError(ValueError):
    """Raised when the reference-score prior collapses (zero spread)."""
