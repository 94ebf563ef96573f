"""Push a gray garment toward "blue" by optimizing a latent residual.

Runs on the offline toy stack in a couple of seconds and writes
before/after PNGs next to this script.
"""

import argparse
from pathlib import Path

import torch

from garmentedit.backends import toy_stack
from garmentedit.core import LatentCode, LossWeights
from garmentedit.io import save_png
from garmentedit.latent_opt import LatentOptConfig, optimize_latent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--prompt", default="blue")
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--out", default=str(Path(__file__).with_name("out_optimize")))
    args = ap.parse_args()

    b = toy_stack()
    start = LatentCode(torch.zeros(b.generator.num_layers, b.generator.latent_dim))
    # toy-scale weights; the baseline defaults keep the residual pinned at zero here
    weights = LossWeights(1.0, 0.01, 0.1, 0.0, 0.0)
    edited, history = optimize_latent(start, args.prompt, b, weights,
                                      LatentOptConfig(max_steps=args.steps))
    for step in (0, args.steps // 4, args.steps // 2, args.steps):
        r = history[step]
        print(f"step {step:4d}  clip {r.terms['clip']:.4f}  |dw| {r.terms['norm']:.3f}")

    out = Path(args.out)
    with torch.no_grad():
        save_png(b.generator.synthesize(start), out / "before.png")
        save_png(b.generator.synthesize(edited), out / "after.png")
    print(f"images in {out}")


if __name__ == "__main__":
    main()
