"""Conditional anomaly synthesis from color, depth and edge conditions."""
from .core import (ConditionTriplet, Decoder, GenerationMode, GenerationResult, ImagePlane, RangeTag, Role,
                   convert_range, fuse)

__version__ = "0.1.0"

__all__ = ["ConditionTriplet", "Decoder", "GenerationMode", "GenerationResult", "ImagePlane", "RangeTag", "Role",
           "convert_range", "fuse", "__version__"]
