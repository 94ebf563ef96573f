"""Adapters for real pretrained networks.

None of these are exercised offline; each imports its heavy dependency
lazily and raises BackendUnavailableError with a pointer to the toy stack
when weights cannot be found. Weights are cached under
``$GARMENTEDIT_CACHE`` (default ``~/.cache/garmentedit``).

Input handling notes:
  * the CLIP adapter squashes the whole frame to 224x224 (no crop), so the
    full-body layout of tall 1024x512 images stays visible;
  * generator output is clamped to [-1, 1] with a straight-through
    gradient.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .backends import BackendUnavailableError
from .colorspace import clamp_unit_ste
from .core import ImageBuffer, LatentCode, RangeTag, RegionMask

CLIP_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_STD = (0.26862954, 0.26130258, 0.27577711)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def cache_dir() -> Path:
    return Path(os.environ.get("GARMENTEDIT_CACHE", Path.home() / ".cache" / "garmentedit"))


def _unavailable(what: str, exc: Exception) -> BackendUnavailableError:
    return BackendUnavailableError(
        f"{what} could not be loaded ({exc}); run with --backend toy for the offline toy stack"
    )


def _nchw_unit(image: ImageBuffer, size, mean, std) -> torch.Tensor:
    x = clamp_unit_ste(image.to_unit().pixels).permute(2, 0, 1).unsqueeze(0)
    x = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    m = torch.tensor(mean, dtype=x.dtype).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=x.dtype).view(1, 3, 1, 1)
    return (x - m) / s


class TorchScriptGenerator(torch.nn.Module):
    """Wraps a scripted synthesis network: (1, L, D) codes -> (1, 3, H, W)."""

    def __init__(self, path, num_layers: int = None, latent_dim: int = None):
        super().__init__()
        try:
            self.net = torch.jit.load(str(path), map_location="cpu")
        except Exception as exc:  # noqa: BLE001 - any load failure is reported the same way
            raise _unavailable(f"generator checkpoint {path}", exc) from exc
        self.path = str(path)
        self.num_layers = num_layers or int(getattr(self.net, "num_ws"))
        self.latent_dim = latent_dim or int(getattr(self.net, "w_dim"))
        with torch.no_grad():
            probe = self.net(torch.zeros(1, self.num_layers, self.latent_dim))
        self.height, self.width = probe.shape[-2:]

    def identifier(self) -> str:
        return f"torchscript-generator({self.path})"

    def synthesize(self, code: LatentCode) -> ImageBuffer:
        img = self.net(code.values.unsqueeze(0))[0].permute(1, 2, 0)
        unit = clamp_unit_ste((img + 1) / 2)
        return ImageBuffer(unit * 2 - 1, RangeTag.SIGNED_UNIT)


class ClipEncoder(torch.nn.Module):
    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        super().__init__()
        try:
            from transformers import CLIPModel, CLIPTokenizer
            self.model = CLIPModel.from_pretrained(model_name, cache_dir=cache_dir())
            self.tokenizer = CLIPTokenizer.from_pretrained(model_name, cache_dir=cache_dir())
        except Exception as exc:  # noqa: BLE001
            raise _unavailable(f"CLIP model {model_name}", exc) from exc
        self.model.eval().requires_grad_(False)
        self.model_name = model_name
        self.embed_dim = self.model.config.projection_dim

    def identifier(self) -> str:
        return f"clip({self.model_name})"

    @torch.no_grad()
    def encode_text(self, prompt: str) -> torch.Tensor:
        tokens = self.tokenizer([prompt], padding=True, return_tensors="pt")
        return self.model.get_text_features(**tokens)[0]

    def encode_image(self, image: ImageBuffer) -> torch.Tensor:
        x = _nchw_unit(image, (224, 224), CLIP_MEAN, CLIP_STD)
        return self.model.get_image_features(pixel_values=x.float())[0].to(image.pixels.dtype)


class ConvNeXtIdentity(torch.nn.Module):
    """Pooled last-stage features of an ImageNet ConvNeXt-Tiny."""

    def __init__(self):
        super().__init__()
        try:
            from torchvision.models import ConvNeXt_Tiny_Weights, convnext_tiny
            torch.hub.set_dir(str(cache_dir()))
            net = convnext_tiny(weights=ConvNeXt_Tiny_Weights.IMAGENET1K_V1)
        except Exception as exc:  # noqa: BLE001
            raise _unavailable("ConvNeXt-Tiny weights", exc) from exc
        self.trunk = net.features.eval().requires_grad_(False)

    def identifier(self) -> str:
        return "convnext-tiny(imagenet)"

    def features(self, image: ImageBuffer) -> torch.Tensor:
        x = _nchw_unit(image, (224, 224), IMAGENET_MEAN, IMAGENET_STD).float()
        return self.trunk(x).mean(dim=(2, 3))[0].to(image.pixels.dtype)


class LpipsDistance(torch.nn.Module):
    """LPIPS with the AlexNet trunk, from the ``lpips`` package."""

    def __init__(self, net: str = "alex"):
        super().__init__()
        try:
            import lpips
            self.metric = lpips.LPIPS(net=net, verbose=False).eval().requires_grad_(False)
        except Exception as exc:  # noqa: BLE001
            raise _unavailable("LPIPS", exc) from exc

    def identifier(self) -> str:
        return "lpips(alex)"

    def distance(self, a: ImageBuffer, b: ImageBuffer) -> torch.Tensor:
        x = a.to_signed().pixels.permute(2, 0, 1).unsqueeze(0).float()
        y = b.to_signed().pixels.permute(2, 0, 1).unsqueeze(0).float()
        return self.metric(x, y).reshape(()).to(a.pixels.dtype)


class TorchScriptParser:
    """Scripted human parser returning (1, C, H, W) class logits; the
    foreground is the total probability of ``foreground_classes``."""

    def __init__(self, path, foreground_classes: Sequence[int], input_size=(512, 512)):
        try:
            self.net = torch.jit.load(str(path), map_location="cpu").eval()
        except Exception as exc:  # noqa: BLE001
            raise _unavailable(f"parser checkpoint {path}", exc) from exc
        self.path = str(path)
        self.classes = list(foreground_classes)
        self.input_size = input_size

    def identifier(self) -> str:
        return f"torchscript-parser({self.path})"

    @torch.no_grad()
    def parse(self, image: ImageBuffer) -> RegionMask:
        h, w = image.shape
        x = _nchw_unit(image, self.input_size, IMAGENET_MEAN, IMAGENET_STD).float()
        probs = self.net(x).softmax(dim=1)
        probs = F.interpolate(probs, size=(h, w), mode="bilinear", align_corners=False)
        fg = probs[0, self.classes].sum(0).clamp(0, 1)
        return RegionMask(fg.to(image.pixels.dtype))
