"""Pivotal tuning: fine-tune generator weights around a fixed pivot code."""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Protocol

import torch

from .backends import BackendUnavailableError, GeneratorBackend, PerceptualDistanceBackend
from .core import ImageBuffer, LatentCode
from .losses import pixel_mse, pti_loss

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PTIConfig:
    learning_rate: float = 5e-4
    max_steps: int = 3500
    tol: float = 1e-4
    lambda2: float = 1.0

    def __post_init__(self):
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


@dataclass
class InversionResult:
    pivot: LatentCode
    tuned_generator: GeneratorBackend
    history: list = field(default_factory=list)
    steps_used: int = 0
    stopped_on_tolerance: bool = False


def pti_tune(x: ImageBuffer, pivot: LatentCode, generator, perceptual: PerceptualDistanceBackend,
             cfg: PTIConfig = PTIConfig()) -> InversionResult:
    """Adam on a copy of the generator's weights, pivot frozen.

    ``history[k]`` is the loss evaluated before update ``k``. The loop stops
    after ``cfg.max_steps`` updates or as soon as two consecutive losses
    differ by less than ``cfg.tol``. The input generator is never modified.
    """
    if (pivot.L, pivot.D) != (generator.num_layers, generator.latent_dim):
        raise ValueError(
            f"pivot shape ({pivot.L}, {pivot.D}) does not match generator "
            f"({generator.num_layers}, {generator.latent_dim})"
        )
    tuned = copy.deepcopy(generator)
    history: list[float] = []
    if cfg.max_steps == 0:
        return InversionResult(pivot, tuned, history, 0)

    params = [p for p in tuned.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=cfg.learning_rate)
    code = LatentCode(pivot.values.detach(), pivot.space_tag)
    target = ImageBuffer(x.pixels.detach(), x.range_tag).to_signed()
    steps = 0
    stopped = False
    for step in range(cfg.max_steps + 1):
        recon = tuned.synthesize(code)
        loss = pti_loss(target, recon, perceptual, cfg.lambda2)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(f"PTI loss became non-finite at step {step}")
        history.append(value)
        if len(history) > 1 and abs(history[-1] - history[-2]) < cfg.tol:
            stopped = True
            break
        if step == cfg.max_steps:
            break
        opt.zero_grad()
        loss.backward()
        opt.step()
        steps += 1
    log.debug("pti: %d updates, final loss %.6g", steps, history[-1])
    return InversionResult(pivot, tuned, history, steps, stopped)


class PivotEncoder(Protocol):
    def encode(self, image: ImageBuffer) -> LatentCode: ...


class DirectOptimizationEncoder:
    """Stand-in for a learned encoder: Adam on the latent code to minimize
    pixel MSE, starting from a seeded small random code."""

    label = "direct-optimization"

    def __init__(self, generator, steps: int = 200, lr: float = 0.05, seed: int = 0,
                 init_scale: float = 0.1):
        self.generator = generator
        self.steps = steps
        self.lr = lr
        self.seed = seed
        self.init_scale = init_scale

    def encode(self, image: ImageBuffer) -> LatentCode:
        G = self.generator
        dtype = next(iter(G.parameters())).dtype
        g = torch.Generator().manual_seed(self.seed)
        init = torch.randn(G.num_layers, G.latent_dim, generator=g, dtype=torch.float64)
        w = (init * self.init_scale).to(dtype).requires_grad_(True)
        target = ImageBuffer(image.pixels.detach().to(dtype), image.range_tag).to_signed()
        opt = torch.optim.Adam([w], lr=self.lr)
        best, best_loss = w.detach().clone(), math.inf
        for _ in range(self.steps):
            loss = pixel_mse(target, G.synthesize(LatentCode(w)))
            value = float(loss.detach())
            if value < best_loss:
                best_loss, best = value, w.detach().clone()
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            final = float(pixel_mse(target, G.synthesize(LatentCode(w))))
        if final < best_loss:
            best = w.detach().clone()
        return LatentCode(best)


def encode_pivot(x: ImageBuffer, encoder: Optional[PivotEncoder]) -> LatentCode:
    if encoder is None:
        raise BackendUnavailableError(
            "no pivot encoder attached; pass DirectOptimizationEncoder(generator) "
            "to fall back to direct latent optimization"
        )
    return encoder.encode(x)
