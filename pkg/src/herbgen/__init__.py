"""Knowledge-guided herb prescription generation with a mask-controlled transformer."""

from herbgen.errors import DataError, HerbgenError, NumericError, UsageError

__all__ = ["DataError", "HerbgenError", "NumericError", "UsageError"]
__version__ = "0.1.0"
