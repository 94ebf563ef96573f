"""Shared value types and the edit configuration.

Everything here is immutable. Tensor fields are torch tensors; the
dataclasses are frozen so the wrappers can be shared freely, but callers
must not mutate the wrapped tensors in place.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import torch
import yaml


class SpaceTag(str, enum.Enum):
    W = "W"
    WPLUS = "WPLUS"


class RangeTag(str, enum.Enum):
    SIGNED_UNIT = "SIGNED_UNIT"  # [-1, 1]
    UNIT = "UNIT"  # [0, 1]

    @property
    def bounds(self) -> tuple[float, float]:
        return (-1.0, 1.0) if self is RangeTag.SIGNED_UNIT else (0.0, 1.0)

    @property
    def width(self) -> float:
        lo, hi = self.bounds
        return hi - lo


RANGE_TOL = 1e-5


@dataclass(frozen=True)
class LatentCode:
    """A point in the generator's style space, shape (L, D)."""

    values: torch.Tensor
    space_tag: SpaceTag = SpaceTag.WPLUS

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise ValueError(f"latent code must be 2-D (L, D), got shape {tuple(v.shape)}")
        L, D = v.shape
        if L < 3 or D < 1:
            raise ValueError(f"latent code needs L >= 3 and D >= 1, got ({L}, {D})")
        if not torch.isfinite(v.detach()).all():
            raise ValueError("latent code contains non-finite entries")
        object.__setattr__(self, "space_tag", SpaceTag(self.space_tag))

    @property
    def L(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def __add__(self, other: LatentCode) -> LatentCode:
        return LatentCode(self.values + other.values, self.space_tag)


@dataclass(frozen=True)
class LatentPartition:
    """Split of L layers into coarse [0, c), medium [c, m), fine [m, L)."""

    coarse_end: int
    medium_end: int
    num_layers: int

    def __post_init__(self):
        if not (0 < self.coarse_end < self.medium_end < self.num_layers):
            raise ValueError(
                "partition needs 0 < coarse_end < medium_end < L, got "
                f"({self.coarse_end}, {self.medium_end}, {self.num_layers})"
            )

    @property
    def coarse(self) -> slice:
        return slice(0, self.coarse_end)

    @property
    def medium(self) -> slice:
        return slice(self.coarse_end, self.medium_end)

    @property
    def fine(self) -> slice:
        return slice(self.medium_end, self.num_layers)

    def slices(self) -> tuple[slice, slice, slice]:
        return self.coarse, self.medium, self.fine


def make_partition(num_layers: int, coarse_end: int, medium_end: int) -> LatentPartition:
    return LatentPartition(int(coarse_end), int(medium_end), int(num_layers))


def _check_embedding(vec: torch.Tensor, name: str) -> None:
    if vec.ndim != 1:
        raise ValueError(f"{name} must be a vector")
    v = vec.detach()
    if not torch.isfinite(v).all():
        raise ValueError(f"{name} has non-finite entries")
    if not bool((v != 0).any()):
        raise ValueError(f"{name} is the zero vector")


@dataclass(frozen=True)
class TextCondition:
    shape_prompt: str
    shape_embedding: torch.Tensor
    color_prompt: Optional[str] = None
    color_embedding: Optional[torch.Tensor] = None

    def __post_init__(self):
        _check_embedding(self.shape_embedding, "shape_embedding")
        if (self.color_prompt is None) != (self.color_embedding is None):
            raise ValueError("color_prompt and color_embedding must be given together")
        if self.color_embedding is not None:
            _check_embedding(self.color_embedding, "color_embedding")
            if self.color_embedding.shape != self.shape_embedding.shape:
                raise ValueError("shape and color embeddings differ in dimension")

    @property
    def has_color(self) -> bool:
        return self.color_embedding is not None

    @classmethod
    def from_encoder(cls, encoder, shape_prompt: str, color_prompt: Optional[str] = None):
        color = encoder.encode_text(color_prompt) if color_prompt is not None else None
        return cls(shape_prompt, encoder.encode_text(shape_prompt), color_prompt, color)


@dataclass(frozen=True)
class ImageBuffer:
    """An (H, W, 3) image with a declared value range."""

    pixels: torch.Tensor
    range_tag: RangeTag = RangeTag.SIGNED_UNIT

    def __post_init__(self):
        object.__setattr__(self, "range_tag", RangeTag(self.range_tag))
        p = self.pixels
        if p.ndim != 3 or p.shape[-1] != 3:
            raise ValueError(f"image must be (H, W, 3), got {tuple(p.shape)}")
        lo, hi = self.range_tag.bounds
        d = p.detach()
        if not torch.isfinite(d).all():
            raise ValueError("image contains non-finite pixels")
        if d.numel() and (d.min() < lo - RANGE_TOL or d.max() > hi + RANGE_TOL):
            raise ValueError(
                f"pixels outside {self.range_tag.value} range: "
                f"[{float(d.min()):.6g}, {float(d.max()):.6g}]"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.pixels.shape[:2])

    def to_unit(self) -> ImageBuffer:
        if self.range_tag is RangeTag.UNIT:
            return self
        return ImageBuffer((self.pixels + 1.0) / 2.0, RangeTag.UNIT)

    def to_signed(self) -> ImageBuffer:
        if self.range_tag is RangeTag.SIGNED_UNIT:
            return self
        return ImageBuffer(self.pixels * 2.0 - 1.0, RangeTag.SIGNED_UNIT)


@dataclass(frozen=True)
class RegionMask:
    """Soft per-pixel foreground indicator, values in [0, 1]."""

    mask: torch.Tensor

    def __post_init__(self):
        m = self.mask.detach()
        if m.ndim != 2:
            raise ValueError(f"mask must be (H, W), got {tuple(m.shape)}")
        if m.numel() and (m.min() < 0 or m.max() > 1):
            raise ValueError("mask values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.mask.shape)

    def __invert__(self) -> RegionMask:
        return RegionMask(1.0 - self.mask)

    def __or__(self, other: RegionMask) -> RegionMask:
        _same_shape(self, other)
        return RegionMask(torch.maximum(self.mask, other.mask))

    def __and__(self, other: RegionMask) -> RegionMask:
        _same_shape(self, other)
        return RegionMask(torch.minimum(self.mask, other.mask))

    @classmethod
    def full(cls, h: int, w: int, dtype=torch.float64) -> RegionMask:
        return cls(torch.ones(h, w, dtype=dtype))


def _same_shape(a: RegionMask, b: RegionMask) -> None:
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def mask_background(a: RegionMask, b: RegionMask) -> RegionMask:
    """Pixels that are background in both masks: (not a) and (not b)."""
    _same_shape(a, b)
    return RegionMask(torch.minimum(1.0 - a.mask, 1.0 - b.mask))


@dataclass(frozen=True)
class LossWeights:
    lambda_clip: float = 1.0
    lambda_l2: float = 1.0
    lambda_id: float = 1.0
    lambda_color: float = 5e-3
    lambda_bg: float = 0.3

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    @classmethod
    def sleeve(cls) -> LossWeights:
        return cls(1.0, 1.0, 1.0, 5e-3, 0.3)

    @classmethod
    def color(cls) -> LossWeights:
        return cls(1.0, 1.0, 1.0, 5e-3, 1.0)

    @classmethod
    def latent_optimizer(cls) -> LossWeights:
        # baseline uses only clip / l2 / id
        return cls(1.0, 1.0, 20.0, 0.0, 0.0)


@dataclass(frozen=True)
class EditConfig:
    partition: LatentPartition = field(default_factory=lambda: make_partition(18, 4, 8))
    weights: LossWeights = field(default_factory=LossWeights.sleeve)
    inject_fine: bool = True
    use_id_loss: bool = True
    learning_rate: float = 5e-4
    max_steps: int = 100_000
    seed: int = 0
    checkpoint_every: int = 5000

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["partition"] = {
            "num_layers": self.partition.num_layers,
            "coarse_end": self.partition.coarse_end,
            "medium_end": self.partition.medium_end,
        }
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> EditConfig:
        data = dict(data)
        _reject_unknown(data, {f.name for f in fields(cls)}, "config")
        kw: dict[str, Any] = {}
        if "partition" in data:
            p = dict(data.pop("partition"))
            _reject_unknown(p, {"num_layers", "coarse_end", "medium_end"}, "partition")
            kw["partition"] = make_partition(p["num_layers"], p["coarse_end"], p["medium_end"])
        if "weights" in data:
            w = dict(data.pop("weights"))
            _reject_unknown(w, {f.name for f in fields(LossWeights)}, "weights")
            kw["weights"] = LossWeights(**{k: float(v) for k, v in w.items()})
        for key in ("inject_fine", "use_id_loss"):
            if key in data:
                val = data.pop(key)
                if not isinstance(val, bool):
                    raise ValueError(f"{key} must be a boolean")
                kw[key] = val
        if "learning_rate" in data:
            kw["learning_rate"] = float(data.pop("learning_rate"))
        for key in ("max_steps", "seed", "checkpoint_every"):
            if key in data:
                kw[key] = int(data.pop(key))
        return cls(**kw)

    def dumps(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> EditConfig:
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ValueError("config file must contain a mapping at top level")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path) -> EditConfig:
        return cls.loads(Path(path).read_text())


def _reject_unknown(data: dict, allowed: set[str], where: str) -> None:
    unknown = set(data) - allowed
    if unknown:
        raise ValueError(f"unknown {where} keys: {sorted(unknown)}")
