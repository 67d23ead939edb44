class ConfigError(ValueError):
    """Raised for invalid fuzzer, campaign or target configuration."""


class InsufficientDataError(ValueError):
    """Raised when a corpus is too small for the requested operation."""
