"""Target-point attention waypoint prediction and a desk-scale driving harness."""

from .numgrid import DimensionError, UsageError

__version__ = "0.1.0"

__all__ = ["DimensionError", "UsageError", "__version__"]
