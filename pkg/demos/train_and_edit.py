"""Train a text-conditioned mapper on toy latents, then apply it.

The mapper learns one residual per (code, prompt) pair. With the
background term switched on, edits stay inside the garment region; the
script trains a second mapper without that term for comparison.
"""

import argparse
from dataclasses import replace
from pathlib import Path

import torch

from garmentedit.backends import toy_stack
from garmentedit.core import EditConfig, LatentCode, LossWeights, TextCondition
from garmentedit.io import save_png
from garmentedit.losses import background_loss
from garmentedit.training import apply_edit, mean_clip_term, split_dataset, train_mapper


def held_out_background(mapper, items, cond, b):
    total = 0.0
    for _, code in items:
        edited, _ = apply_edit(mapper, code, cond, b.generator)
        with torch.no_grad():
            total += float(background_loss(b.generator.synthesize(code), edited, b.parser))
    return total / len(items)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--prompt", default="blue")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--out", default=str(Path(__file__).with_name("out_mapper")))
    args = ap.parse_args()

    b = toy_stack()
    g = torch.Generator().manual_seed(123)
    items = [(f"z{i:02d}", LatentCode(torch.randn(18, 16, generator=g) * 0.5)) for i in range(30)]
    ds = split_dataset(items, ratio=2 / 3, seed=0)
    cond = TextCondition.from_encoder(b.encoder, args.prompt)

    cfg = EditConfig(weights=LossWeights(1.0, 0.01, 0.1, 0.0, 1.0), learning_rate=1e-2,
                     max_steps=args.steps)
    print(f"training on {len(ds.train)} codes, holding out {len(ds.test)}")
    result = train_mapper(ds, cond, cfg, b)
    control = train_mapper(ds, cond, replace(cfg, weights=replace(cfg.weights, lambda_bg=0.0)), b)

    held = ds.test_items()
    print(f"held-out clip term: {mean_clip_term(control.mapper, held, cond, b):.3f} (no bg term) "
          f"vs {mean_clip_term(result.mapper, held, cond, b):.3f} (with bg term)")
    print(f"held-out background change: {held_out_background(control.mapper, held, cond, b):.3f} "
          f"vs {held_out_background(result.mapper, held, cond, b):.4f}")

    out = Path(args.out)
    for name, code in held[:3]:
        edited, _ = apply_edit(result.mapper, code, cond, b.generator)
        with torch.no_grad():
            save_png(b.generator.synthesize(code), out / f"{name}_orig.png")
        save_png(edited, out / f"{name}_edit.png")
    print(f"images in {out}")


if __name__ == "__main__":
    main()
