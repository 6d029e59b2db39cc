"""Joint infrared-visible image fusion and semantic segmentation."""

from mafs.errors import ConfigError, InvalidInputError, NumericError

__version__ = "0.1.0"

__all__ = ["ConfigError", "InvalidInputError", "NumericError", "__version__"]
