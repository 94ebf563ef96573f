"""Differentiable sRGB -> XYZ -> CIELAB conversion (D65, IEC 61966-2-1)."""

from __future__ import annotations

import torch

from .core import ImageBuffer, RangeTag, RegionMask

# linear sRGB -> XYZ, D65
SRGB_TO_XYZ = (
    (0.4124564, 0.3575761, 0.1804375),
    (0.2126729, 0.7151522, 0.0721750),
    (0.0193339, 0.1191920, 0.9503041),
)

_DELTA = 6.0 / 29.0
_EPS = 1e-12


class EmptyRegionError(ValueError):
    pass


def clamp_unit_ste(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass, identity gradient in the backward pass."""
    return x + (x.clamp(0.0, 1.0) - x).detach()


def _srgb_to_linear(c: torch.Tensor) -> torch.Tensor:
    low = c / 12.92
    high = ((c.clamp_min(0.04045) + 0.055) / 1.055) ** 2.4
    return torch.where(c <= 0.04045, low, high)


def _lab_f(t: torch.Tensor) -> torch.Tensor:
    # value and slope of both branches agree at t = delta**3
    cube = t.clamp_min(_DELTA**3).pow(1.0 / 3.0)
    lin = t / (3 * _DELTA**2) + 4.0 / 29.0
    return torch.where(t > _DELTA**3, cube, lin)


def linear_rgb_to_lab(rgb: torch.Tensor) -> torch.Tensor:
    m = torch.tensor(SRGB_TO_XYZ, dtype=rgb.dtype, device=rgb.device)
    xyz = rgb @ m.T
    # white point = image of RGB (1, 1, 1), so white maps exactly to L* = 100
    white = m.sum(dim=1)
    f = _lab_f(xyz / white)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return torch.stack([L, a, b], dim=-1)


def srgb_to_lab(img: ImageBuffer) -> torch.Tensor:
    """Convert a UNIT-range image to an (H, W, 3) tensor of (L*, a*, b*)."""
    if img.range_tag is not RangeTag.UNIT:
        raise ValueError(f"srgb_to_lab expects a UNIT image, got {img.range_tag.value}")
    rgb = clamp_unit_ste(img.pixels)
    return linear_rgb_to_lab(_srgb_to_linear(rgb))


def image_to_lab(img: ImageBuffer) -> torch.Tensor:
    """Like :func:`srgb_to_lab` but accepts either range tag."""
    return srgb_to_lab(img.to_unit())


def masked_mean_lab(img: ImageBuffer, mask: RegionMask) -> torch.Tensor:
    """Mask-weighted mean LAB color, sum(lab * m) / sum(m) per channel.

    The LAB values are weighted, not the RGB pixels, so background pixels
    drop out instead of pulling the mean toward black.
    """
    if tuple(mask.shape) != tuple(img.shape):
        raise ValueError(f"mask shape {mask.shape} does not match image {img.shape}")
    lab = image_to_lab(img)
    m = mask.mask.to(lab.dtype)
    total = m.sum()
    if not total > 0:
        raise EmptyRegionError("mask selects no pixels (empty foreground)")
    return (lab * m[..., None]).sum(dim=(0, 1)) / total
