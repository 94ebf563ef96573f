"""Acceptance suite: one test and one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v``; the summary lines are
printed at the end of the session (and immediately with ``-s``).
"""

import json
import os
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

import garmentedit.losses as L
from garmentedit.backends import toy_parser, toy_stack
from garmentedit.colorspace import srgb_to_lab
from garmentedit.core import (EditConfig, ImageBuffer, LatentCode, LossWeights, RangeTag,
                              RegionMask, TextCondition, make_partition)
from garmentedit.inversion import PTIConfig, pti_tune
from garmentedit.io import save_latent, save_png
from garmentedit.latent_opt import LatentOptConfig, optimize_latent
from garmentedit.mapper import ModulationLayer, TextMapper
from garmentedit.metrics import PSNR_CAP, Region, acd, evaluate_folder, fid, psnr, region_mask, ssim
from garmentedit.training import LatentDataset, apply_edit, mean_clip_term, train_mapper

from conftest import ACCEPTANCE_LINES, central_difference_check
from test_colorspace import scalar_lab
from test_mapper import modulate_oracle


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _stack64():
    b = toy_stack(dtype=torch.float64)
    for net in (b.generator, b.identity, b.perceptual):
        net.requires_grad_(False)
    return b


def _code(seed, dtype=torch.float64):
    return LatentCode(torch.randn(18, 16, generator=torch.Generator().manual_seed(seed), dtype=dtype) * 0.5)


def test_criterion_01_loss_identities():
    t0 = time.perf_counter()
    b = _stack64()
    x = b.generator.synthesize(_code(1))
    e = b.encoder.encode_image(x)
    vals = {
        "clip": float(L.clip_loss(e, e.clone())),
        "id": float(L.id_loss(x, x, b.identity)),
        "color": float(L.color_loss(x, x, b.parser)),
        "bg": float(L.background_loss(x, x, b.parser)),
        "norm": float(L.norm_loss(torch.zeros(18, 16, dtype=torch.float64))),
        "pti": float(L.pti_loss(x, x, b.perceptual)),
    }
    dt = time.perf_counter() - t0
    worst = max(abs(v) for v in vals.values())
    record(1, worst <= 1e-9 and dt < 10, f"max |term| = {worst:.2e} (tol 1e-9), {dt:.2f}s")


def test_criterion_02_gradients():
    t0 = time.perf_counter()
    b = _stack64()
    G = b.generator
    w = _code(2).values
    orig = G.synthesize(LatentCode(w))
    text = b.encoder.encode_text("blue")
    delta = torch.randn(18, 16, generator=torch.Generator().manual_seed(3), dtype=torch.float64) * 0.3

    def through(f):
        return lambda d: f(G.synthesize(LatentCode(w + d)))

    target = ImageBuffer(orig.pixels * 0.9)
    layer = ModulationLayer(16, 8).double()
    emb = torch.randn(8, dtype=torch.float64)
    y = torch.randn(8, 16, dtype=torch.float64)
    checks = {
        "clip": (through(lambda im: L.clip_loss(b.encoder.encode_image(im), text)), delta),
        "id": (through(lambda im: L.id_loss(orig, im, b.identity)), delta),
        "norm": (L.norm_loss, delta),
        "color": (through(lambda im: L.color_loss(orig, im, b.parser)), delta),
        "bg": (through(lambda im: L.background_loss(orig, im, b.parser)), delta),
        "pti": (lambda p: L.pti_loss(target, ImageBuffer(torch.tanh(p)), b.perceptual),
                torch.atanh(orig.pixels.clamp(-0.99, 0.99)) + 0.05),
        "modulation(y)": (lambda t: (layer(t, emb) ** 2).sum(), y),
        "modulation(e)": (lambda t: (layer(y, t) ** 2).sum(), emb),
    }
    errs = {k: central_difference_check(f, x0, probes=10) for k, (f, x0) in checks.items()}
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    record(2, errs[worst] < 1e-4 and dt < 120,
           f"worst rel. error {errs[worst]:.1e} ({worst}) over {len(errs)} checks x 10 probes, {dt:.1f}s")


def test_criterion_03_colorspace():
    def lab(rgb):
        px = torch.tensor(rgb, dtype=torch.float64).view(1, 1, 3)
        return srgb_to_lab(ImageBuffer(px, RangeTag.UNIT))[0, 0].tolist()
    white, black, red = lab((1, 1, 1)), lab((0, 0, 0)), lab((1, 0, 0))
    ok_wb = max(abs(a - b) for a, b in zip(white + black, (100, 0, 0, 0, 0, 0))) <= 1e-6
    red_err = max(abs(a - b) for a, b in zip(red, (53.24, 80.09, 67.20)))
    oracle_err = max(abs(a - b) for a, b in zip(red, scalar_lab(1, 0, 0)))
    levels = torch.linspace(0, 1, 100, dtype=torch.float64).view(100, 1, 1).expand(100, 1, 3).contiguous()
    Ls = srgb_to_lab(ImageBuffer(levels, RangeTag.UNIT))[:, 0, 0]
    mono = bool((Ls[1:] > Ls[:-1]).all())
    record(3, ok_wb and red_err < 0.05 and oracle_err < 0.05 and mono,
           f"white/black exact={ok_wb}, red err {red_err:.3f} (oracle {oracle_err:.1e}), gray monotone={mono}")


def test_criterion_04_modulation():
    layer = ModulationLayer(16, 8).double()
    e = torch.randn(8, dtype=torch.float64)
    y = torch.randn(8, 16, dtype=torch.float64)
    zeroed = ModulationLayer(16, 8).double()
    for p in zeroed.parameters():
        nn.init.zeros_(p)
    ones = torch.equal(zeroed(y, e), torch.ones_like(y))
    const = torch.full((8, 16), -2.5, dtype=torch.float64)
    degenerate = torch.allclose(layer(const, e), 1 + layer.f_beta(e).expand(8, 16), atol=1e-12)
    worst = 0.0
    for s in range(10):
        g = torch.Generator().manual_seed(100 + s)
        yy = torch.randn(8, 16, generator=g, dtype=torch.float64)
        gamma, beta = layer.f_gamma(e), layer.f_beta(e)
        worst = max(worst, float((layer(yy, e) - modulate_oracle(yy, gamma, beta)).detach().abs().max()))
    record(4, ones and degenerate and worst <= 1e-6,
           f"zero nets -> ones exact={ones}, constant input -> 1+beta={degenerate}, oracle err {worst:.1e}")


def test_criterion_05_mapper_locality():
    P = make_partition(18, 4, 8)
    b = _stack64()
    m = TextMapper(P, 16, 16).double()
    w = _code(4).values
    s = b.encoder.encode_text("long sleeve")
    zero_ok = torch.equal(m(w, s, b.encoder.encode_text("red")), torch.zeros_like(w))
    torch.manual_seed(0)
    for p in m.parameters():
        nn.init.normal_(p, std=0.3)
    a = m(w, s, b.encoder.encode_text("red"))
    c = m(w, s, b.encoder.encode_text("green"))
    local = torch.equal(a[:8], c[:8]) and not torch.equal(a[8:], c[8:])
    # fine-injection ablation: fine residual independent of the text
    m2 = TextMapper(P, 16, 16, inject_fine=False).double()
    m2.load_state_dict(m.state_dict())
    f1 = m2(w, s, b.encoder.encode_text("red"))[8:]
    f2 = m2(w, b.encoder.encode_text("short sleeve"), b.encoder.encode_text("green"))[8:]
    fine_off = torch.equal(f1, f2)
    # identity-loss ablation: id contributes exactly nothing
    cond = TextCondition.from_encoder(b.encoder, "long sleeve", "red")
    d = torch.randn(18, 16, dtype=torch.float64) * 0.3
    full = L.total_loss_tdgem(w, d, cond, LossWeights.color(), b)
    ablated = L.total_loss_tdgem(w, d, cond, LossWeights.color(), b, use_id_loss=False)
    id_off = ablated.weights["id"] == 0.0 and full.terms["id"] > 0 and \
        abs(ablated.value - (full.value - full.terms["id"])) < 1e-12
    record(5, zero_ok and local and fine_off and id_off,
           f"zero-init dw=0 {zero_ok}, color->fine only {local}, no-fine-injection {fine_off}, no-id {id_off}")


def test_criterion_06_table_weights(monkeypatch):
    terms = dict(clip=0.5, norm=0.2, id=0.1, color=2.0, bg=0.3)
    fixed = lambda v: (lambda *a, **k: torch.tensor(v, dtype=torch.float64))
    monkeypatch.setattr(L, "clip_term", fixed(terms["clip"]))
    monkeypatch.setattr(L, "norm_loss", fixed(terms["norm"]))
    monkeypatch.setattr(L, "id_loss", fixed(terms["id"]))
    monkeypatch.setattr(L, "color_loss", fixed(terms["color"]))
    monkeypatch.setattr(L, "background_loss", fixed(terms["bg"]))
    b = _stack64()
    cond = TextCondition.from_encoder(b.encoder, "long sleeve")
    w = torch.zeros(18, 16, dtype=torch.float64)
    sleeve = L.total_loss_tdgem(w, w, cond, LossWeights.sleeve(), b).value
    color = L.total_loss_tdgem(w, w, cond, LossWeights.color(), b).value
    ok = abs(sleeve - 0.90) <= 1e-9 and abs(color - 1.81) <= 1e-9
    record(6, ok, f"sleeve {sleeve:.12g} (target 0.90), color {color:.12g} (target 1.81)")


def _fg_blue(G, parser, code):
    with torch.no_grad():
        img = G.synthesize(code).to_unit()
        m = parser.parse(img).mask
        return float((img.pixels[..., 2] * m).sum() / m.sum())


def test_criterion_07_latent_optimizer():
    t0 = time.perf_counter()
    b = toy_stack()
    start = LatentCode(torch.zeros(18, 16))
    with torch.no_grad():
        gray = float(b.generator.synthesize(start).pixels.abs().max()) < 1e-6
    weights = LossWeights(1.0, 0.01, 0.1, 0.0, 0.0)
    cfg = LatentOptConfig(learning_rate=0.1, max_steps=200, seed=0)
    out1, hist = optimize_latent(start, "blue", b, weights, cfg)
    out2, _ = optimize_latent(start, "blue", b, weights, cfg)
    with torch.no_grad():
        clip = float(L.clip_loss(b.encoder.encode_image(b.generator.synthesize(out1)),
                                 b.encoder.encode_text("blue")))
    before, after = _fg_blue(b.generator, b.parser, start), _fg_blue(b.generator, b.parser, out1)
    same = torch.equal(out1.values, out2.values)
    dt = time.perf_counter() - t0
    record(7, gray and clip < 0.05 and after > before and same and dt < 60,
           f"clip {hist[0].terms['clip']:.3f} -> {clip:.4f} (<0.05), fg blue {before:.3f} -> {after:.3f}, "
           f"deterministic={same}, {dt:.1f}s")


def _train(weights, b, ds, cond):
    cfg = EditConfig(weights=weights, learning_rate=1e-2, max_steps=300, seed=0, checkpoint_every=1000)
    return train_mapper(ds, cond, cfg, b, optimizer="ranger").mapper


def test_criterion_08_mapper_training():
    t0 = time.perf_counter()
    b = toy_stack()
    g = torch.Generator().manual_seed(123)
    items = [(f"z{i:02d}", LatentCode(torch.randn(18, 16, generator=g) * 0.5)) for i in range(30)]
    ds = LatentDataset(items, list(range(20)), list(range(20, 30)))
    cond = TextCondition.from_encoder(b.encoder, "blue")
    weights = LossWeights(1.0, 0.01, 0.1, 0.0, 1.0)
    untrained = TextMapper(EditConfig().partition, 16, 16)
    trained = _train(weights, b, ds, cond)
    control = _train(replace(weights, lambda_bg=0.0), b, ds, cond)
    held = ds.test_items()
    clip0 = mean_clip_term(untrained, held, cond, b)
    clip1 = mean_clip_term(trained, held, cond, b)

    def mean_bg(mapper):
        vals = []
        for _, code in held:
            edited, _ = apply_edit(mapper, code, cond, b.generator)
            with torch.no_grad():
                vals.append(float(L.background_loss(b.generator.synthesize(code), edited, b.parser)))
        return sum(vals) / len(vals)

    bg, bg_ctrl = mean_bg(trained), mean_bg(control)
    dt = time.perf_counter() - t0
    reduction = 1 - clip1 / clip0
    record(8, reduction >= 0.5 and bg < 0.05 * bg_ctrl and dt < 300,
           f"held-out clip {clip0:.3f} -> {clip1:.3f} ({reduction:.0%} reduction), "
           f"bg {bg:.4f} vs control {bg_ctrl:.3f} (ratio {bg / bg_ctrl:.4f}), {dt:.1f}s")


def test_criterion_09_pti():
    b = toy_stack()
    G = b.generator
    pivot = LatentCode(torch.randn(18, 16, generator=torch.Generator().manual_seed(5)) * 0.5)
    with torch.no_grad():
        base = G.synthesize(pivot)
        ys = torch.linspace(-1, 1, G.height)[:, None, None]
        x = ImageBuffer((base.pixels + 0.2 * torch.sin(3 * ys)).clamp(-1, 1))
        mse0 = float(L.pixel_mse(x, base))
    res = pti_tune(x, pivot, G, b.perceptual, PTIConfig(max_steps=500, tol=1e-6))
    with torch.no_grad():
        mse1 = float(L.pixel_mse(x, res.tuned_generator.synthesize(pivot)))
    perfect = pti_tune(base, pivot, G, b.perceptual, PTIConfig())
    frozen = pti_tune(x, pivot, G, b.perceptual, PTIConfig(max_steps=0))
    same = all(torch.equal(p, q) for p, q in zip(frozen.tuned_generator.parameters(), G.parameters()))
    ratio = mse1 / mse0
    record(9, res.steps_used <= 500 and ratio <= 0.1 and perfect.stopped_on_tolerance and same,
           f"MSE ratio {ratio:.3f} after {res.steps_used} steps (<=0.10), tolerance stop on perfect pivot "
           f"after {perfect.steps_used} steps={perfect.stopped_on_tolerance}, max_steps=0 identical={same}")


def test_criterion_10_metrics():
    g = torch.Generator().manual_seed(0)
    a = ImageBuffer(torch.rand(32, 32, 3, generator=g, dtype=torch.float64) * 2 - 1)
    full = RegionMask(torch.ones(32, 32, dtype=torch.float64))
    rng = np.random.default_rng(0)
    feats = rng.normal(size=(100, 8))
    ident = (ssim(a, a) == 1.0 and psnr(a, a) == PSNR_CAP and acd(a, a, full) == 0.0
             and fid(feats, feats) <= 1e-6)
    mu = np.array([2.0, -1.0, 0.5, 0.0])
    f = fid(rng.normal(size=(5000, 4)), rng.normal(size=(5000, 4)) + mu)
    rel = abs(f - mu @ mu) / (mu @ mu)
    parser, b = toy_parser(), toy_stack()
    pairs = []
    for i in range(5):
        with torch.no_grad():
            o = b.generator.synthesize(_code(10 + i, torch.float32))
            e = b.generator.synthesize(_code(20 + i, torch.float32))
        pairs.append((o, e))
    rep = evaluate_folder(pairs, parser, Region.BACKGROUND, b.identity.features)
    per = []
    for o, e in pairs:
        m = region_mask(Region.BACKGROUND, parser.parse(o), parser.parse(e))
        per.append((ssim(o, e, m), psnr(o, e, m), acd(o, e, m)))
    per = np.mean(np.array(per), axis=0)
    agg = max(abs(rep.ssim - per[0]), abs(rep.psnr - per[1]), abs(rep.acd - per[2]))
    record(10, ident and rel < 0.02 and agg <= 1e-9,
           f"identity scores ok={ident}, Gaussian FID rel. error {rel:.2%} (<2%), aggregation err {agg:.1e}")


def _cli(args, env):
    return subprocess.run([sys.executable, "-m", "garmentedit", *args], env=env,
                          capture_output=True, text=True)


def test_criterion_11_cli_determinism(tmp_path):
    t0 = time.perf_counter()
    # an empty home and cache: nothing can come from downloaded weights
    env = dict(os.environ, HOME=str(tmp_path / "home"), GARMENTEDIT_CACHE=str(tmp_path / "cache"),
               HF_HUB_OFFLINE="1", TORCH_HOME=str(tmp_path / "torch"))
    b = toy_stack()
    g = torch.Generator().manual_seed(1)
    for i in range(5):
        code = LatentCode(torch.randn(18, 16, generator=g) * 0.5)
        save_latent(code, tmp_path / "data" / f"c{i}", seed=1)
        with torch.no_grad():
            save_png(b.generator.synthesize(code), tmp_path / "imgs" / f"i{i}.png")
    d = str(tmp_path)
    runs = {
        "invert": ["invert", "--image", f"{d}/imgs/i0.png", "--out", f"{d}/inv",
                   "--encoder-steps", "20", "--pti-steps", "20"],
        "optimize": ["optimize", "--latent", f"{d}/data/c1", "--text", "red", "--out", f"{d}/opt",
                     "--steps", "20"],
        "train-mapper": ["train-mapper", "--dataset", f"{d}/data", "--text", "blue", "--color", "red",
                         "--out", f"{d}/train", "--max-steps", "20", "--lr", "0.01"],
        "edit": ["edit", "--latent", f"{d}/data/c2", "--text", "blue", "--color", "red",
                 "--mapper", f"{d}/train/final.pt", "--out", f"{d}/edit", "--blend"],
        "evaluate": ["evaluate", "--orig", f"{d}/imgs", "--edited", f"{d}/imgs",
                     "--out", f"{d}/eval/report.json"],
    }
    problems = []
    for name, argv in runs.items():
        first = _cli(argv, env)
        if first.returncode != 0:
            problems.append(f"{name}: {first.stderr.strip()}")
            continue
        out = tmp_path / (argv[argv.index("--out") + 1].split("/")[-1] if name != "evaluate" else "eval")
        replay = tmp_path / f"replay_{name}"
        second = _cli(["replay", str(out / "manifest.json"), "--out", str(replay)], env)
        if second.returncode != 0:
            problems.append(f"{name} replay: {second.stderr.strip()}")
            continue
        a = json.loads((out / "manifest.json").read_text())["outputs"]
        c = json.loads((replay / "manifest.json").read_text())["outputs"]
        if not a or a != c:
            problems.append(f"{name}: output hashes differ")
    downloaded = any((tmp_path / p).exists() for p in ("cache", "torch", "home/.cache"))
    dt = time.perf_counter() - t0
    record(11, not problems and not downloaded,
           f"{len(runs)} subcommands replayed byte-identically={not problems}, "
           f"weights downloaded={downloaded}, {dt:.1f}s" + (f" {problems}" if problems else ""))
