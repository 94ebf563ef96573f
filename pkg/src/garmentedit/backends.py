"""Model backend interfaces and small deterministic toy implementations.

The editing algorithms only talk to the five protocols below. The toy
classes are tiny fixed-weight torch modules: cheap, differentiable and
fully reproducible from a seed, which is what the test-suite and the
``--backend toy`` CLI path run on.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Protocol, runtime_checkable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ImageBuffer, LatentCode, RangeTag, RegionMask


class UnknownPromptError(ValueError):
    pass


class BackendUnavailableError(RuntimeError):
    pass


@runtime_checkable
class GeneratorBackend(Protocol):
    num_layers: int
    latent_dim: int
    height: int
    width: int

    def synthesize(self, code: LatentCode) -> ImageBuffer: ...

    def parameters(self): ...


@runtime_checkable
class JointEncoderBackend(Protocol):
    embed_dim: int

    def encode_text(self, prompt: str) -> torch.Tensor: ...

    def encode_image(self, image: ImageBuffer) -> torch.Tensor: ...


@runtime_checkable
class ParserBackend(Protocol):
    def parse(self, image: ImageBuffer) -> RegionMask: ...


@runtime_checkable
class IdentityFeatureBackend(Protocol):
    def features(self, image: ImageBuffer) -> torch.Tensor: ...


@runtime_checkable
class PerceptualDistanceBackend(Protocol):
    def distance(self, a: ImageBuffer, b: ImageBuffer) -> torch.Tensor: ...


@dataclass
class Backends:
    generator: GeneratorBackend
    encoder: JointEncoderBackend
    parser: ParserBackend
    identity: IdentityFeatureBackend
    perceptual: Optional[PerceptualDistanceBackend] = None


# foreground rectangle shared by the toy generator and toy parser,
# as fractions (top, left, bottom, right)
TOY_FOREGROUND = (0.25, 0.25, 0.9375, 0.75)


def _rect_mask(h: int, w: int, rect, dtype=torch.float64) -> torch.Tensor:
    top, left, bottom, right = rect
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w
    rows = (ys >= top) & (ys < bottom)
    cols = (xs >= left) & (xs < right)
    return (rows[:, None] & cols[None, :]).to(dtype)


def _to_nchw(pixels: torch.Tensor) -> torch.Tensor:
    return pixels.permute(2, 0, 1).unsqueeze(0)


class ToyGenerator(nn.Module):
    """Latent code -> image decoder with a handful of spatial basis maps.

    Each layer's code is lifted through its own affine map and tanh, the
    layer features are mixed into per-basis RGB coefficients, and the
    image is tanh(sum_b basis_b * coef_b). The zero code decodes to flat
    mid-gray. All weights are trainable parameters so PTI can tune them.

    Like late StyleGAN layers, the last 5/9 of the layers only reach the
    foreground bases, so a residual confined to them recolors the garment
    region and leaves the background untouched.
    """

    def __init__(self, num_layers=18, latent_dim=16, height=32, width=32, seed=0,
                 hidden=8, dtype=torch.float32):
        super().__init__()
        self.num_layers = num_layers
        self.latent_dim = latent_dim
        self.height = height
        self.width = width
        self.seed = seed
        self.hidden = hidden
        g = torch.Generator().manual_seed(seed)
        bases = self._make_bases(height, width, g)
        nb = bases.shape[0]
        lift = torch.randn(num_layers, latent_dim, hidden, generator=g, dtype=torch.float64)
        mix = torch.randn(num_layers, hidden, nb, 3, generator=g, dtype=torch.float64)
        late = round(num_layers * 4 / 9)
        mix[late:, :, [0, 3, 4, 5]] = 0.0
        self.lift = nn.Parameter((lift / math.sqrt(latent_dim)).to(dtype))
        self.mix = nn.Parameter((mix * 1.5 / math.sqrt(num_layers * hidden)).to(dtype))
        self.bias = nn.Parameter(torch.zeros(nb, 3, dtype=dtype))
        self.bases = nn.Parameter(bases.to(dtype))

    @staticmethod
    def _make_bases(h, w, g):
        ys = torch.linspace(-1, 1, h, dtype=torch.float64)[:, None].expand(h, w)
        xs = torch.linspace(-1, 1, w, dtype=torch.float64)[None, :].expand(h, w)
        fg = _rect_mask(h, w, TOY_FOREGROUND)
        upper = fg * (ys < ys[int(h * 0.5), 0]).to(torch.float64)
        cy, cx = (torch.rand(2, generator=g, dtype=torch.float64) - 0.5)
        blob = torch.exp(-((ys - cy) ** 2 + (xs - cx) ** 2) / 0.3)
        return torch.stack([torch.ones(h, w, dtype=torch.float64) * (1 - fg), fg, upper,
                            ys * (1 - fg), xs * (1 - fg), blob])

    def identifier(self) -> str:
        return (f"toy-generator(L={self.num_layers},D={self.latent_dim},"
                f"H={self.height},W={self.width},seed={self.seed})")

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        """(..., L, D) codes -> (..., H, W, 3) images in [-1, 1]."""
        w = w.to(self.lift.dtype)
        feats = torch.tanh(torch.einsum("...ld,ldk->...lk", w, self.lift))
        coefs = torch.einsum("...lk,lkbc->...bc", feats, self.mix) + self.bias
        pre = torch.einsum("bhw,...bc->...hwc", self.bases, coefs)
        return torch.tanh(pre)

    def synthesize(self, code: LatentCode) -> ImageBuffer:
        if tuple(code.values.shape) != (self.num_layers, self.latent_dim):
            raise ValueError(
                f"code shape {tuple(code.values.shape)} does not match generator "
                f"({self.num_layers}, {self.latent_dim})"
            )
        return ImageBuffer(self.forward(code.values), RangeTag.SIGNED_UNIT)

    def config(self) -> dict:
        return dict(num_layers=self.num_layers, latent_dim=self.latent_dim,
                    height=self.height, width=self.width, seed=self.seed, hidden=self.hidden)


def toy_generator(num_layers=18, latent_dim=16, height=32, width=32, seed=0,
                  dtype=torch.float32) -> ToyGenerator:
    if min(num_layers, latent_dim, height, width) < 1:
        raise ValueError("generator dimensions must be positive")
    return ToyGenerator(num_layers, latent_dim, height, width, seed, dtype=dtype)


# canonical images behind each vocabulary entry: (upper-half RGB, lower-half RGB)
_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "purple": (0.5, 0.0, 0.5),
    "orange": (1.0, 0.5, 0.0),
    "pink": (1.0, 0.75, 0.8),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "grey": (0.5, 0.5, 0.5),
}
_SLEEVES = {
    "a long sleeve": 0.2,
    "long sleeve": 0.2,
    "long sleeves": 0.2,
    "a short sleeve": -0.2,
    "short sleeve": -0.2,
    "short sleeves": -0.2,
    "sleeveless": -0.35,
}


def normalize_prompt(prompt: str) -> str:
    text = re.sub(r"\s+", " ", prompt.strip().lower()).rstrip(".")
    for suffix in (" color", " colour", " shirt", " dress", " garment"):
        if text.endswith(suffix) and text[: -len(suffix)] in _COLORS:
            text = text[: -len(suffix)]
    return text


def _canonical_image(prompt: str, h=8, w=8) -> torch.Tensor:
    key = normalize_prompt(prompt)
    img = torch.empty(h, w, 3, dtype=torch.float64)
    if key in _COLORS:
        img[:] = torch.tensor(_COLORS[key], dtype=torch.float64)
    elif key in _SLEEVES:
        d = _SLEEVES[key]
        img[: h // 2] = 0.5 + d / 2
        img[h // 2:] = 0.5 - d / 2
    else:
        raise UnknownPromptError(
            f"toy encoder does not know the prompt {prompt!r}; known prompts: "
            f"{sorted(set(_COLORS) | set(_SLEEVES))}"
        )
    return img


class ToyJointEncoder(nn.Module):
    """Shared text/image embedding built from a few global image statistics.

    An image is summarized by its centered mean RGB, the luminance of the
    upper half minus the lower half (a crude sleeve-length cue) and a
    constant, then projected to ``embed_dim`` and L2-normalized. A prompt
    embeds as the image embedding of its canonical picture, so an image
    that looks like the prompt scores cosine similarity near one.
    """

    n_stats = 5

    def __init__(self, embed_dim=16, seed=0):
        super().__init__()
        if embed_dim < 3:
            raise ValueError("embed_dim must be >= 3")
        self.embed_dim = embed_dim
        self.seed = seed
        g = torch.Generator().manual_seed(seed + 1)
        raw = torch.randn(embed_dim, self.n_stats, generator=g, dtype=torch.float64)
        if embed_dim >= self.n_stats:
            raw, _ = torch.linalg.qr(raw)  # orthonormal columns keep cosines intact
        self.register_buffer("proj", raw)

    def identifier(self) -> str:
        return f"toy-encoder(E={self.embed_dim},seed={self.seed})"

    def image_stats(self, pixels_unit: torch.Tensor) -> torch.Tensor:
        h = pixels_unit.shape[-3]
        mean_rgb = pixels_unit.mean(dim=(-3, -2))
        lum = pixels_unit @ torch.tensor([0.299, 0.587, 0.114], dtype=pixels_unit.dtype)
        sleeve = lum[..., : h // 2, :].mean(dim=(-2, -1)) - lum[..., h // 2:, :].mean(dim=(-2, -1))
        const = torch.full_like(sleeve, 0.25)
        return torch.cat([mean_rgb - 0.5, sleeve[..., None], const[..., None]], dim=-1)

    def _embed(self, pixels_unit: torch.Tensor) -> torch.Tensor:
        v = self.image_stats(pixels_unit) @ self.proj.to(pixels_unit.dtype).T
        return v / v.norm(dim=-1, keepdim=True)

    def encode_image(self, image: ImageBuffer) -> torch.Tensor:
        return self._embed(image.to_unit().pixels)

    def encode_text(self, prompt: str) -> torch.Tensor:
        return self._embed(_canonical_image(prompt))


def toy_joint_encoder(embed_dim=16, seed=0) -> ToyJointEncoder:
    return ToyJointEncoder(embed_dim, seed)


class ToyParser:
    """Foreground = a fixed rectangle, or pixels brighter than a threshold.

    ``rect`` is (top, left, bottom, right) as fractions of the image; a pixel
    is foreground when its center falls inside. The mask is returned
    detached: no gradients flow through parsing.
    """

    def __init__(self, rect=TOY_FOREGROUND, threshold: Optional[float] = None):
        self.rect = tuple(rect) if rect is not None else None
        self.threshold = threshold
        if self.rect is None and threshold is None:
            raise ValueError("toy parser needs a rectangle or a luminance threshold")

    def identifier(self) -> str:
        if self.threshold is not None:
            return f"toy-parser(threshold={self.threshold})"
        return f"toy-parser(rect={self.rect})"

    def parse(self, image: ImageBuffer) -> RegionMask:
        h, w = image.shape
        px = image.pixels.detach()
        if self.threshold is not None:
            lum = image.to_unit().pixels.detach() @ torch.tensor(
                [0.299, 0.587, 0.114], dtype=px.dtype)
            return RegionMask((lum > self.threshold).to(px.dtype))
        return RegionMask(_rect_mask(h, w, self.rect, dtype=px.dtype))


def toy_parser(rect=TOY_FOREGROUND, threshold: Optional[float] = None) -> ToyParser:
    return ToyParser(rect, threshold)


class ToyIdentityNet(nn.Module):
    """Fixed random conv trunk: 3x3 conv, tanh, 4x4 average pool, linear."""

    def __init__(self, feature_dim=32, seed=0, channels=8, grid=4):
        super().__init__()
        self.feature_dim = feature_dim
        self.seed = seed
        self.grid = grid
        g = torch.Generator().manual_seed(seed + 2)
        self.register_buffer("conv", torch.randn(channels, 3, 3, 3, generator=g, dtype=torch.float64) / 3.0)
        self.register_buffer(
            "head",
            torch.randn(feature_dim, channels * grid * grid, generator=g, dtype=torch.float64)
            / math.sqrt(channels * grid * grid),
        )

    def identifier(self) -> str:
        return f"toy-identity(F={self.feature_dim},seed={self.seed})"

    def features(self, image: ImageBuffer) -> torch.Tensor:
        x = _to_nchw(image.pixels)
        y = torch.tanh(F.conv2d(x, self.conv.to(x.dtype), padding=1))
        y = F.adaptive_avg_pool2d(y, self.grid).flatten()
        return self.head.to(x.dtype) @ y


def toy_identity(feature_dim=32, seed=0) -> ToyIdentityNet:
    return ToyIdentityNet(feature_dim, seed)


class ToyPerceptual(nn.Module):
    """LPIPS-shaped distance over a fixed random conv layer at two scales.

    Features are unit-normalized across channels at every location and the
    squared differences averaged, so d(x, x) = 0 and d is symmetric.
    """

    def __init__(self, seed=0, channels=8):
        super().__init__()
        self.seed = seed
        g = torch.Generator().manual_seed(seed + 3)
        self.register_buffer("conv", torch.randn(channels, 3, 3, 3, generator=g, dtype=torch.float64) / 3.0)

    def identifier(self) -> str:
        return f"toy-perceptual(seed={self.seed})"

    def _feats(self, x):
        f = F.leaky_relu(F.conv2d(x, self.conv.to(x.dtype), padding=1), 0.2)
        return f / torch.sqrt((f * f).sum(dim=1, keepdim=True) + 1e-10)

    def distance(self, a: ImageBuffer, b: ImageBuffer) -> torch.Tensor:
        if a.shape != b.shape:
            raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
        x, y = _to_nchw(a.pixels), _to_nchw(b.pixels)
        total = 0.0
        for scale in (1, 2):
            if scale > 1:
                x, y = F.avg_pool2d(x, 2), F.avg_pool2d(y, 2)
            total = total + ((self._feats(x) - self._feats(y)) ** 2).sum(dim=1).mean()
        return total


def toy_perceptual(seed=0) -> ToyPerceptual:
    return ToyPerceptual(seed)


def toy_stack(seed=0, num_layers=18, latent_dim=16, height=32, width=32, embed_dim=16,
              feature_dim=32, dtype=torch.float32) -> Backends:
    """All five toy backends wired together with a shared foreground region."""
    return Backends(
        generator=toy_generator(num_layers, latent_dim, height, width, seed, dtype=dtype),
        encoder=toy_joint_encoder(embed_dim, seed),
        parser=toy_parser(),
        identity=toy_identity(feature_dim, seed),
        perceptual=toy_perceptual(seed),
    )


def backend_id(backend) -> str:
    ident = getattr(backend, "identifier", None)
    return ident() if callable(ident) else type(backend).__name__


def save_generator(generator, path) -> None:
    """Write a generator checkpoint readable by :func:`load_generator`."""
    if not isinstance(generator, ToyGenerator):
        raise TypeError("only toy generators can be checkpointed by this toolkit")
    state = {k: v.detach().clone() for k, v in generator.state_dict().items()}
    torch.save({"kind": "toy-generator", "config": generator.config(), "state_dict": state}, path)


def load_generator(spec: str, dtype=torch.float32, **toy_kwargs):
    """Resolve ``toy`` or ``checkpoint:<path>`` to a generator backend.

    A checkpoint is either one written by :func:`save_generator` or a
    TorchScript module mapping (1, L, D) codes to (1, 3, H, W) images in
    [-1, 1], wrapped by :class:`TorchScriptGenerator`.
    """
    if spec == "toy":
        return toy_generator(dtype=dtype, **toy_kwargs)
    if not spec.startswith("checkpoint:"):
        raise ValueError(f"generator must be 'toy' or 'checkpoint:<path>', got {spec!r}")
    path = spec[len("checkpoint:"):]
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise BackendUnavailableError(
            f"generator checkpoint not found: {path} (use --generator toy for the offline toy stack)"
        ) from None
    except Exception:
        from .pretrained import TorchScriptGenerator
        return TorchScriptGenerator(path)
    if isinstance(blob, dict) and blob.get("kind") == "toy-generator":
        gen = ToyGenerator(**blob["config"], dtype=dtype)
        gen.load_state_dict(blob["state_dict"])
        return gen
    raise BackendUnavailableError(f"unrecognized generator checkpoint format: {path}")
