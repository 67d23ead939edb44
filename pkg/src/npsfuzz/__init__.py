"""Neural program smoothing fuzzer with a desk-scale evaluation harness."""

from .errors import ConfigError, InsufficientDataError

__version__ = "0.1.0"

__all__ = ["ConfigError", "InsufficientDataError", "__version__"]
