"""Residual latent mappers.

``TextMapper`` is the text-conditioned three-cluster mapper: one sub-mapper
per coarse/medium/fine slice, each a stack of five
pixel-norm -> linear -> modulation -> leaky-ReLU blocks whose modulation
layers read a text embedding. ``PlainMapper`` is the per-prompt baseline
with the same three-cluster layout and no conditioning.

Every layer of a slice passes through the same sub-mapper weights, and
each sub-mapper ends in a zero-initialized linear layer so an untrained
mapper returns a zero residual.
"""

from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LatentCode, LatentPartition, TextCondition

MODULATION_EPS = 1e-8
NUM_BLOCKS = 5


class PixelNorm(nn.Module):
    def forward(self, x):
        return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + 1e-8)


def conditioning_net(embed_dim: int, feature_dim: int) -> nn.Sequential:
    """linear -> layer norm -> leaky ReLU(0.2) -> linear, embedding to features."""
    return nn.Sequential(
        nn.Linear(embed_dim, feature_dim),
        nn.LayerNorm(feature_dim),
        nn.LeakyReLU(0.2),
        nn.Linear(feature_dim, feature_dim),
    )


def modulate(y: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor,
             eps: float = MODULATION_EPS) -> torch.Tensor:
    """1 + gamma * (y - mean) / (std + eps) + beta.

    Mean and (population) standard deviation are taken over the last
    axis, per sample and per layer. gamma and beta broadcast against y.
    """
    mu = y.mean(dim=-1, keepdim=True)
    sigma = y.std(dim=-1, keepdim=True, unbiased=False)
    return 1.0 + gamma * (y - mu) / (sigma + eps) + beta


class ModulationLayer(nn.Module):
    def __init__(self, feature_dim: int, embed_dim: int, eps: float = MODULATION_EPS):
        super().__init__()
        self.f_gamma = conditioning_net(embed_dim, feature_dim)
        self.f_beta = conditioning_net(embed_dim, feature_dim)
        self.eps = eps

    def forward(self, y: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        # e: (E,) or (B, E); y: (..., n, D) with the batch axis leading
        gamma = self.f_gamma(e)
        beta = self.f_beta(e)
        if e.ndim > 1:
            extra = y.ndim - gamma.ndim
            gamma = gamma.reshape(gamma.shape[:1] + (1,) * extra + gamma.shape[1:])
            beta = beta.reshape(beta.shape[:1] + (1,) * extra + beta.shape[1:])
        return modulate(y, gamma, beta, self.eps)


class ModulatedBlock(nn.Module):
    def __init__(self, dim: int, embed_dim: int):
        super().__init__()
        self.norm = PixelNorm()
        self.fc = nn.Linear(dim, dim)
        self.mod = ModulationLayer(dim, embed_dim)

    def forward(self, x, e):
        return F.leaky_relu(self.mod(self.fc(self.norm(x)), e), 0.2)


class ModulatedSubMapper(nn.Module):
    def __init__(self, dim: int, embed_dim: int, num_blocks: int = NUM_BLOCKS, zero_init: bool = True):
        super().__init__()
        self.blocks = nn.ModuleList(ModulatedBlock(dim, embed_dim) for _ in range(num_blocks))
        self.out = nn.Linear(dim, dim)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor, embeddings: Sequence[torch.Tensor]) -> torch.Tensor:
        """``embeddings`` holds one conditioning vector per block."""
        for block, e in zip(self.blocks, embeddings):
            x = block(x, e)
        return self.out(x)


class PlainSubMapper(nn.Module):
    def __init__(self, dim: int, num_layers: int = 4, zero_init: bool = True):
        super().__init__()
        layers: list[nn.Module] = [PixelNorm()]
        for _ in range(num_layers):
            layers += [nn.Linear(dim, dim), nn.LeakyReLU(0.2)]
        self.net = nn.Sequential(*layers)
        self.out = nn.Linear(dim, dim)
        if zero_init:
            nn.init.zeros_(self.out.weight)
            nn.init.zeros_(self.out.bias)

    def forward(self, x):
        return self.out(self.net(x))


def _check_layout(values: torch.Tensor, partition: LatentPartition, dim: int) -> None:
    if values.shape[-2] != partition.num_layers or values.shape[-1] != dim:
        raise ValueError(
            f"code shape {tuple(values.shape[-2:])} does not match mapper layout "
            f"({partition.num_layers}, {dim})"
        )


class TextMapper(nn.Module):
    """Text-conditioned residual mapper over coarse / medium / fine slices.

    The shape embedding conditions all three sub-mappers. When a color
    embedding is present the fine sub-mapper uses the shape embedding in
    its first ``color_split`` blocks and the color embedding in the rest.
    With ``inject_fine=False`` every fine block sees the neutral (zero)
    embedding instead.
    """

    kind = "text"

    def __init__(self, partition: LatentPartition, latent_dim: int, embed_dim: int,
                 inject_fine: bool = True, color_split: int = 3, zero_init: bool = True):
        super().__init__()
        if not 0 <= color_split <= NUM_BLOCKS:
            raise ValueError("color_split must be within the block count")
        self.partition = partition
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.inject_fine = inject_fine
        self.color_split = color_split
        self.coarse = ModulatedSubMapper(latent_dim, embed_dim, zero_init=zero_init)
        self.medium = ModulatedSubMapper(latent_dim, embed_dim, zero_init=zero_init)
        self.fine = ModulatedSubMapper(latent_dim, embed_dim, zero_init=zero_init)

    def fine_embeddings(self, shape_e: torch.Tensor, color_e: Optional[torch.Tensor]):
        if not self.inject_fine:
            return [torch.zeros_like(shape_e)] * NUM_BLOCKS
        if color_e is None:
            return [shape_e] * NUM_BLOCKS
        return [shape_e] * self.color_split + [color_e] * (NUM_BLOCKS - self.color_split)

    def forward(self, w: torch.Tensor, shape_e: torch.Tensor,
                color_e: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(..., L, D) codes -> (..., L, D) residuals.

        Embeddings are (E,) shared across the batch, or (B, E) matching a
        leading batch axis of ``w``.
        """
        if shape_e is None:
            raise ValueError("the shape embedding is required")
        _check_layout(w, self.partition, self.latent_dim)
        dtype = self.coarse.out.weight.dtype
        w = w.to(dtype)
        shape_e = shape_e.to(dtype)
        color_e = color_e.to(dtype) if color_e is not None else None
        c, m, f = self.partition.slices()
        out_c = self.coarse(w[..., c, :], [shape_e] * NUM_BLOCKS)
        out_m = self.medium(w[..., m, :], [shape_e] * NUM_BLOCKS)
        out_f = self.fine(w[..., f, :], self.fine_embeddings(shape_e, color_e))
        return torch.cat([out_c, out_m, out_f], dim=-2)


class PlainMapper(nn.Module):
    """Unconditioned three-cluster mapper; one instance is trained per prompt."""

    kind = "plain"

    def __init__(self, partition: LatentPartition, latent_dim: int, zero_init: bool = True):
        super().__init__()
        self.partition = partition
        self.latent_dim = latent_dim
        self.coarse = PlainSubMapper(latent_dim, zero_init=zero_init)
        self.medium = PlainSubMapper(latent_dim, zero_init=zero_init)
        self.fine = PlainSubMapper(latent_dim, zero_init=zero_init)

    def forward(self, w: torch.Tensor) -> torch.Tensor:
        _check_layout(w, self.partition, self.latent_dim)
        w = w.to(self.coarse.out.weight.dtype)
        c, m, f = self.partition.slices()
        return torch.cat([self.coarse(w[..., c, :]), self.medium(w[..., m, :]),
                          self.fine(w[..., f, :])], dim=-2)


def forward_tdgem(mapper: TextMapper, w: LatentCode, cond: TextCondition) -> LatentCode:
    """Residual latent for ``w`` under the text condition."""
    if cond.shape_embedding is None:
        raise ValueError("the shape embedding is required")
    delta = mapper(w.values, cond.shape_embedding, cond.color_embedding)
    return LatentCode(delta, w.space_tag)


def forward_styleclip(mapper: PlainMapper, w: LatentCode) -> LatentCode:
    return LatentCode(mapper(w.values), w.space_tag)


def mapper_residual(mapper, w: torch.Tensor, cond: Optional[TextCondition]) -> torch.Tensor:
    """Dispatch on mapper kind; tensor in, tensor out."""
    if isinstance(mapper, TextMapper):
        return mapper(w, cond.shape_embedding, cond.color_embedding)
    return mapper(w)
