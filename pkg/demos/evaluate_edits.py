"""Score a batch of edits on the background region only.

Edits confined to the garment leave background PSNR at its cap and ACD at
0. SSIM still drops a little: its 11x11 windows centered on background
pixels near the garment overlap the edited region, and on a 32x32 toy
image that is most of them.
"""

import torch

from garmentedit.backends import toy_stack
from garmentedit.core import LatentCode
from garmentedit.metrics import Region, evaluate_folder


def main():
    b = toy_stack()
    G = b.generator
    g = torch.Generator().manual_seed(0)
    local, spill = [], []
    for _ in range(8):
        w = torch.randn(18, 16, generator=g) * 0.5
        late = torch.zeros_like(w)
        late[10:] = torch.randn(8, 16, generator=g)
        with torch.no_grad():
            orig = G.synthesize(LatentCode(w))
            local.append((orig, G.synthesize(LatentCode(w + late))))
            spill.append((orig, G.synthesize(LatentCode(w + 0.3 * torch.randn(18, 16, generator=g)))))

    for name, pairs in (("late-layer edits", local), ("all-layer edits", spill)):
        rep = evaluate_folder(pairs, b.parser, Region.BACKGROUND, b.identity.features)
        print(f"{name:17s} SSIM {rep.ssim:.4f}  PSNR {rep.psnr:6.2f}  ACD {rep.acd:.3f}  FID {rep.fid:.4f}")


if __name__ == "__main__":
    main()
