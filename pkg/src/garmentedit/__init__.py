"""Text-driven garment editing in a StyleGAN-style latent space."""

__version__ = "0.1.0"

from .core import (EditConfig, ImageBuffer, LatentCode, LatentPartition, LossWeights,
                   RangeTag, RegionMask, SpaceTag, TextCondition, make_partition,
                   mask_background)
from .backends import Backends, toy_stack

__all__ = [
    "Backends", "EditConfig", "ImageBuffer", "LatentCode", "LatentPartition", "LossWeights",
    "RangeTag", "RegionMask", "SpaceTag", "TextCondition", "make_partition",
    "mask_background", "toy_stack",
]
