"""Loss terms for latent editing and generator tuning.

All terms are plain torch expressions, so they are differentiable with
respect to whatever produced their inputs (a residual latent, mapper
weights, generator weights).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import torch

from .backends import Backends, IdentityFeatureBackend, ParserBackend, PerceptualDistanceBackend
from .colorspace import masked_mean_lab
from .core import ImageBuffer, LatentCode, LossWeights, TextCondition, mask_background

TERM_WEIGHT = {
    "clip": "lambda_clip",
    "norm": "lambda_l2",
    "id": "lambda_id",
    "color": "lambda_color",
    "bg": "lambda_bg",
}


@dataclass
class LossReport:
    """Weighted total plus the unweighted value of every term.

    ``total`` keeps its autograd graph; ``terms`` and ``weights`` are plain
    floats for logging.
    """

    total: torch.Tensor
    terms: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return float(self.total.detach())

    def recomputed_total(self) -> float:
        return sum(self.weights[k] * v for k, v in self.terms.items())


def combine_terms(terms: dict[str, torch.Tensor], weights: dict[str, float]) -> LossReport:
    """Weighted sum of named terms. Terms with weight 0 are skipped, so they
    contribute exactly nothing to the total or its gradient."""
    total = None
    for name, value in terms.items():
        w = weights[name]
        if w == 0:
            continue
        contrib = w * value
        total = contrib if total is None else total + contrib
    if total is None:
        ref = next(iter(terms.values()), torch.tensor(0.0))
        total = torch.zeros((), dtype=torch.as_tensor(ref).dtype)
    return LossReport(
        total=total,
        terms={k: float(torch.as_tensor(v).detach()) for k, v in terms.items()},
        weights=dict(weights),
    )


def weights_table(weights: LossWeights, names) -> dict[str, float]:
    return {n: float(getattr(weights, TERM_WEIGHT[n])) for n in names}


def clip_loss(image_embedding: torch.Tensor, text_embedding: torch.Tensor) -> torch.Tensor:
    """1 - cos(image, text), in [0, 2]."""
    if image_embedding.shape != text_embedding.shape:
        raise ValueError(
            f"embedding dims differ: {tuple(image_embedding.shape)} vs {tuple(text_embedding.shape)}"
        )
    na = image_embedding.norm()
    nb = text_embedding.norm()
    if float(na.detach()) == 0 or float(nb.detach()) == 0:
        raise ValueError("clip_loss got a zero-norm embedding")
    text_embedding = text_embedding.to(image_embedding.dtype)
    nb = nb.to(image_embedding.dtype)
    cos = (image_embedding @ text_embedding) / (na * nb)
    # rounding can push cos a hair past +-1
    return (1.0 - cos).clamp(0.0, 2.0)


def id_loss(orig: ImageBuffer, edited: ImageBuffer, identity: IdentityFeatureBackend) -> torch.Tensor:
    """Mean squared difference of identity features."""
    if orig.shape != edited.shape:
        raise ValueError(f"image shapes differ: {orig.shape} vs {edited.shape}")
    f1 = identity.features(orig)
    f2 = identity.features(edited)
    return ((f1 - f2) ** 2).mean()


def norm_loss(residual) -> torch.Tensor:
    """Euclidean norm of the flattened residual latent."""
    values = residual.values if isinstance(residual, LatentCode) else residual
    return torch.linalg.vector_norm(values.reshape(-1))


def color_loss(orig: ImageBuffer, edited: ImageBuffer, parser: ParserBackend) -> torch.Tensor:
    """L1 distance between foreground mean LAB colors of the two images."""
    if orig.shape != edited.shape:
        raise ValueError(f"image shapes differ: {orig.shape} vs {edited.shape}")
    before = masked_mean_lab(orig, parser.parse(orig))
    after = masked_mean_lab(edited, parser.parse(edited))
    return (after - before).abs().sum()


def background_loss(orig: ImageBuffer, edited: ImageBuffer, parser: ParserBackend) -> torch.Tensor:
    """L2 norm of the pixel change restricted to pixels that are background
    in both images. Not averaged: this is the root of the summed squares."""
    if orig.shape != edited.shape:
        raise ValueError(f"image shapes differ: {orig.shape} vs {edited.shape}")
    bg = mask_background(parser.parse(orig), parser.parse(edited)).mask
    diff = (edited.pixels - orig.pixels) * bg.to(edited.pixels.dtype)[..., None]
    return torch.linalg.vector_norm(diff.reshape(-1))


def pixel_mse(a: ImageBuffer, b: ImageBuffer) -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return ((a.pixels - b.pixels) ** 2).mean()


def pti_loss(x: ImageBuffer, recon: ImageBuffer, perceptual: PerceptualDistanceBackend,
             lambda2: float = 1.0) -> torch.Tensor:
    """Perceptual distance plus ``lambda2`` times pixel MSE."""
    if lambda2 < 0:
        raise ValueError("lambda2 must be >= 0")
    if x.shape != recon.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {recon.shape}")
    loss = perceptual.distance(x, recon)
    if lambda2:
        loss = loss + lambda2 * pixel_mse(x, recon)
    return loss


def clip_term(edited: ImageBuffer, cond: TextCondition, encoder) -> torch.Tensor:
    """CLIP loss against the shape prompt, averaged with the color prompt's
    when one is given."""
    emb = encoder.encode_image(edited)
    loss = clip_loss(emb, cond.shape_embedding.to(emb.dtype))
    if cond.has_color:
        loss = 0.5 * (loss + clip_loss(emb, cond.color_embedding.to(emb.dtype)))
    return loss


def _as_values(code) -> torch.Tensor:
    return code.values if isinstance(code, LatentCode) else code


def total_loss_tdgem(w, residual, cond: TextCondition, weights: LossWeights, backends: Backends,
                     use_id_loss: bool = True, orig: Optional[ImageBuffer] = None) -> LossReport:
    """Five-term objective for the text-conditioned mapper.

    ``orig`` may be passed to reuse an already-synthesized G(w).
    """
    w = _as_values(w)
    residual = _as_values(residual)
    G = backends.generator
    if orig is None:
        with torch.no_grad():
            orig = G.synthesize(LatentCode(w))
    edited = G.synthesize(LatentCode(w + residual))
    terms = {
        "clip": clip_term(edited, cond, backends.encoder),
        "norm": norm_loss(residual),
        "id": id_loss(orig, edited, backends.identity) if use_id_loss else torch.zeros(()),
        "color": color_loss(orig, edited, backends.parser),
        "bg": background_loss(orig, edited, backends.parser),
    }
    table = weights_table(weights, terms)
    if not use_id_loss:
        table["id"] = 0.0
    return combine_terms(terms, table)


def total_loss_latent_optimizer(w, delta, text_embedding: torch.Tensor, weights: LossWeights,
                                backends: Backends, orig: Optional[ImageBuffer] = None) -> LossReport:
    """Three-term objective of the per-image latent optimizer (clip, norm, id)."""
    w = _as_values(w)
    delta = _as_values(delta)
    G = backends.generator
    if orig is None:
        with torch.no_grad():
            orig = G.synthesize(LatentCode(w))
    edited = G.synthesize(LatentCode(w + delta))
    emb = backends.encoder.encode_image(edited)
    terms = {
        "clip": clip_loss(emb, text_embedding.to(emb.dtype)),
        "norm": norm_loss(delta),
        "id": id_loss(orig, edited, backends.identity),
    }
    return combine_terms(terms, weights_table(weights, terms))


# the mapper baseline trained per prompt uses the same three terms
total_loss_styleclip = total_loss_latent_optimizer
