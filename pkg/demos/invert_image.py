"""Invert an image the toy generator cannot reproduce exactly.

A direct-optimization encoder finds a pivot code, then generator tuning
closes the remaining gap while the pivot stays fixed.
"""

import argparse

import torch

from garmentedit.backends import toy_stack
from garmentedit.core import ImageBuffer, LatentCode
from garmentedit.inversion import DirectOptimizationEncoder, PTIConfig, encode_pivot, pti_tune
from garmentedit.losses import pixel_mse


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    args = ap.parse_args()

    b = toy_stack()
    G = b.generator
    truth = LatentCode(torch.randn(18, 16, generator=torch.Generator().manual_seed(5)) * 0.5)
    with torch.no_grad():
        ys = torch.linspace(-1, 1, G.height)[:, None, None]
        x = ImageBuffer((G.synthesize(truth).pixels + 0.2 * torch.sin(3 * ys)).clamp(-1, 1))

    pivot = encode_pivot(x, DirectOptimizationEncoder(G, steps=200))
    with torch.no_grad():
        print(f"pivot reconstruction MSE: {float(pixel_mse(x, G.synthesize(pivot))):.5f}")

    res = pti_tune(x, pivot, G, b.perceptual, PTIConfig(max_steps=args.steps, tol=1e-6))
    with torch.no_grad():
        err = float(pixel_mse(x, res.tuned_generator.synthesize(pivot)))
    print(f"after {res.steps_used} tuning steps: MSE {err:.5f}")
    print(f"loss {res.history[0]:.4f} -> {res.history[-1]:.4f}")


if __name__ == "__main__":
    main()
