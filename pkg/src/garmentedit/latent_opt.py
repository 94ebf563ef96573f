"""Per-image latent optimization baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .backends import Backends
from .core import LatentCode, LossWeights
from .inversion import NonFiniteLossError
from .losses import LossReport, total_loss_latent_optimizer


@dataclass(frozen=True)
class LatentOptConfig:
    learning_rate: float = 0.1
    max_steps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be > 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")


def optimize_latent(w: LatentCode, text: str, backends: Backends,
                    weights: LossWeights = LossWeights.latent_optimizer(),
                    cfg: LatentOptConfig = LatentOptConfig()):
    """Adam on a residual that starts at exactly zero.

    Returns ``(w + best_delta, history)``; the residual kept is the one with
    the lowest total loss seen, and ``history[k]`` is the report at iterate k.
    """
    torch.manual_seed(cfg.seed)
    G = backends.generator
    dtype = next(iter(G.parameters())).dtype
    base = w.values.detach().to(dtype)
    text_e = backends.encoder.encode_text(text).to(dtype)
    with torch.no_grad():
        orig = G.synthesize(LatentCode(base))
    delta = torch.zeros_like(base, requires_grad=True)
    opt = torch.optim.Adam([delta], lr=cfg.learning_rate)

    history: list[LossReport] = []
    best_delta, best_loss = delta.detach().clone(), math.inf
    for step in range(cfg.max_steps + 1):
        report = total_loss_latent_optimizer(base, delta, text_e, weights, backends, orig=orig)
        if not math.isfinite(report.value):
            raise NonFiniteLossError(f"latent optimization loss non-finite at step {step}")
        history.append(report)
        if report.value < best_loss:
            best_loss, best_delta = report.value, delta.detach().clone()
        if step == cfg.max_steps:
            break
        opt.zero_grad()
        report.total.backward()
        opt.step()
        report.total = report.total.detach()
    return LatentCode(base + best_delta, w.space_tag), history
