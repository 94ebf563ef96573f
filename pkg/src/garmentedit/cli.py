"""Command-line entry point: invert, optimize, train-mapper, edit, evaluate, replay.

Every command writes one ``manifest.json`` into its output directory with
the exact argument list, the resolved config, backend identifiers and a
sha256 of every file it produced. ``replay`` re-runs a manifest into a new
directory; on the toy stack the outputs are byte-identical.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import torch

from . import __version__
from .backends import (Backends, BackendUnavailableError, backend_id, load_generator,
                       save_generator, toy_stack)
from .core import EditConfig, LatentCode, LossWeights, RegionMask, TextCondition
from .inversion import DirectOptimizationEncoder, PTIConfig, encode_pivot, pti_tune
from .io import (list_latents, load_latent, load_png, save_latent, save_png,
                 write_history_csv, write_json)
from .latent_opt import LatentOptConfig, optimize_latent
from .metrics import Region, evaluate_folder
from .training import (apply_edit, blend_preserved_regions, load_mapper, log_rows_to_scalars,
                       split_dataset, train_mapper)

log = logging.getLogger("garmentedit")

MANIFEST = "manifest.json"


class CommandError(RuntimeError):
    pass


def sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def resolve_backends(args) -> Backends:
    if args.backend == "toy":
        b = toy_stack(seed=args.seed)
        if args.generator != "toy":
            b.generator = load_generator(args.generator)
        return b
    # pretrained stack: every network must be resolvable
    from .pretrained import ClipEncoder, ConvNeXtIdentity, LpipsDistance, TorchScriptParser
    if args.generator == "toy" or not args.parser:
        raise BackendUnavailableError(
            "--backend pretrained needs --generator checkpoint:<path> and --parser <path>; "
            "use --backend toy for the offline toy stack"
        )
    return Backends(
        generator=load_generator(args.generator),
        encoder=ClipEncoder(),
        parser=TorchScriptParser(args.parser, foreground_classes=args.fg_classes),
        identity=ConvNeXtIdentity(),
        perceptual=LpipsDistance(),
    )


def load_config(args) -> EditConfig:
    """defaults < config file < flags"""
    cfg = EditConfig.load(args.config) if getattr(args, "config", None) else EditConfig()
    over = {}
    if getattr(args, "lr", None) is not None:
        over["learning_rate"] = args.lr
    if getattr(args, "max_steps", None) is not None:
        over["max_steps"] = args.max_steps
    if args.seed_given:
        over["seed"] = args.seed
    if getattr(args, "no_fine_injection", False):
        over["inject_fine"] = False
    if getattr(args, "no_id_loss", False):
        over["use_id_loss"] = False
    return replace(cfg, **over)


def write_manifest(out: Path, args, argv, config: dict, backends: Backends | None, started: float):
    outputs = {
        str(p.relative_to(out)): sha256(p)
        for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST
    }
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": config,
        "seed": args.seed,
        "backends": {
            name: backend_id(getattr(backends, name))
            for name in ("generator", "encoder", "parser", "identity", "perceptual")
        } if backends is not None else {},
        "code_version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        "outputs": outputs,
    }
    write_json(out / MANIFEST, manifest)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what="input") -> Path:
    p = Path(path)
    if not p.exists():
        raise CommandError(f"{what} not found: {p}")
    return p


def _invert_image(image_path, backends: Backends, args):
    x = load_png(_require(image_path, "image"))
    if x.shape != (backends.generator.height, backends.generator.width):
        raise CommandError(
            f"image is {x.shape[0]}x{x.shape[1]}, generator produces "
            f"{backends.generator.height}x{backends.generator.width}"
        )
    encoder = DirectOptimizationEncoder(backends.generator, steps=args.encoder_steps, seed=args.seed)
    pivot = encode_pivot(x, encoder)
    cfg = PTIConfig(learning_rate=args.pti_lr, max_steps=args.pti_steps, tol=args.pti_tol)
    return x, pivot, pti_tune(x, pivot, backends.generator, backends.perceptual, cfg), cfg


def cmd_invert(args, argv):
    started = time.time()
    torch.manual_seed(args.seed)
    backends = resolve_backends(args)
    out = _out_dir(args.out)
    x, pivot, result, cfg = _invert_image(args.image, backends, args)
    save_latent(pivot, out / "pivot", seed=args.seed)
    save_generator(result.tuned_generator, out / "generator.pt")
    write_history_csv(out / "history.csv", [(i, "loss", v) for i, v in enumerate(result.history)])
    with torch.no_grad():
        save_png(result.tuned_generator.synthesize(pivot), out / "reconstruction.png")
    write_manifest(out, args, argv, {"pti": vars(cfg), "pivot_encoder": "direct-optimization",
                                     "encoder_steps": args.encoder_steps}, backends, started)


def cmd_optimize(args, argv):
    started = time.time()
    torch.manual_seed(args.seed)
    backends = resolve_backends(args)
    code, _ = load_latent(_require(Path(args.latent).with_suffix(".bin"), "latent file"))
    weights = LossWeights(args.lambda_clip, args.lambda_l2, args.lambda_id, 0.0, 0.0)
    cfg = LatentOptConfig(learning_rate=args.lr, max_steps=args.steps, seed=args.seed)
    out = _out_dir(args.out)
    edited, history = optimize_latent(code, args.text, backends, weights, cfg)
    save_latent(edited, out / "latent", seed=args.seed)
    with torch.no_grad():
        save_png(backends.generator.synthesize(edited), out / "edited.png")
    rows = [(i, k, v) for i, r in enumerate(history) for k, v in [("total", r.value), *r.terms.items()]]
    write_history_csv(out / "history.csv", rows)
    write_manifest(out, args, argv, {"weights": vars(weights), "optimizer": vars(cfg),
                                     "text": args.text}, backends, started)


def cmd_train(args, argv):
    started = time.time()
    cfg = load_config(args)
    backends = resolve_backends(args)
    paths = list_latents(_require(args.dataset, "dataset directory"))
    if not paths:
        raise CommandError(f"no latent files in {args.dataset}")
    items = [(p.stem, load_latent(p)[0]) for p in paths]
    dataset = split_dataset(items, args.split, cfg.seed)
    cond = TextCondition.from_encoder(backends.encoder, args.text, args.color)
    out = _out_dir(args.out)
    result = train_mapper(dataset, cond, cfg, backends, kind=args.kind,
                          optimizer=args.optimizer, out_dir=out)
    write_history_csv(out / "log.csv", log_rows_to_scalars(result.log))
    write_json(out / "split.json", {"train": [items[i][0] for i in dataset.train],
                                    "test": [items[i][0] for i in dataset.test]})
    write_manifest(out, args, argv, {"edit": cfg.to_dict(), "kind": args.kind,
                                     "text": args.text, "color": args.color,
                                     "latent_source": args.latent_source}, backends, started)


def cmd_edit(args, argv):
    started = time.time()
    torch.manual_seed(args.seed)
    if bool(args.image) == bool(args.latent):
        raise CommandError("give exactly one of --image or --latent")
    backends = resolve_backends(args)
    mapper_path = _require(args.mapper, "mapper checkpoint")
    source = _require(args.image) if args.image else _require(Path(args.latent).with_suffix(".bin"), "latent file")
    out = _out_dir(args.out)
    config = {"mapper": str(mapper_path), "text": args.text, "color": args.color,
              "blend": args.blend, "source": str(source)}
    if args.dry_run:
        load_mapper(mapper_path, backends.generator)
        TextCondition.from_encoder(backends.encoder, args.text, args.color)
        write_manifest(out, args, argv, {**config, "dry_run": True}, backends, started)
        return
    mapper, _ = load_mapper(mapper_path, backends.generator)
    generator = backends.generator
    if args.image:
        _, code, result, _ = _invert_image(args.image, backends, args)
        generator = result.tuned_generator
    else:
        code, _ = load_latent(source)
    cond = TextCondition.from_encoder(backends.encoder, args.text, args.color)
    edited, w_new = apply_edit(mapper, code, cond, generator)
    with torch.no_grad():
        orig = generator.synthesize(code)
    if args.blend:
        fg = backends.parser.parse(orig) | backends.parser.parse(edited)
        edited = blend_preserved_regions(orig, edited, RegionMask(1.0 - fg.mask))
    save_png(orig, out / "original.png")
    save_png(edited, out / "edited.png")
    save_latent(w_new, out / "latent", seed=args.seed)
    write_manifest(out, args, argv, config, backends, started)


def _image_pairs(orig_dir: Path, edited_dir: Path):
    names = sorted(p.name for p in orig_dir.glob("*.png"))
    if not names:
        raise CommandError(f"no PNG images in {orig_dir}")
    missing = [n for n in names if not (edited_dir / n).exists()]
    if missing:
        raise CommandError(f"edited folder {edited_dir} lacks {missing[:5]}")
    pairs = [(load_png(orig_dir / n, dtype=torch.float64), load_png(edited_dir / n, dtype=torch.float64))
             for n in names]
    return names, pairs


def cmd_evaluate(args, argv):
    started = time.time()
    backends = resolve_backends(args)
    names, pairs = _image_pairs(_require(args.orig, "folder"), _require(args.edited, "folder"))
    report = evaluate_folder(pairs, backends.parser, Region(args.region),
                             backends.identity.features, ids=names, jobs=args.jobs)
    out_path = Path(args.out)
    out = _out_dir(out_path.parent)
    write_json(out_path, {**report.to_dict(), "images": names,
                          "feature_trunk": backend_id(backends.identity)})
    write_manifest(out, args, argv, {"region": args.region, "orig": str(args.orig),
                                     "edited": str(args.edited)}, backends, started)


def cmd_replay(args, argv):
    manifest = json.loads(_require(args.manifest, "manifest").read_text())
    old = list(manifest["argv"])
    flag = "--out"
    if flag not in old:
        raise CommandError("manifest argv has no --out to redirect")
    i = old.index(flag)
    if manifest["command"] == "evaluate":
        old[i + 1] = str(Path(args.out) / Path(old[i + 1]).name)
    else:
        old[i + 1] = str(args.out)
    return main(old)


def _common(p: argparse.ArgumentParser):
    p.add_argument("--backend", choices=["toy", "pretrained"], default="toy")
    p.add_argument("--generator", default="toy", help="toy | checkpoint:<path>")
    p.add_argument("--parser", default=None, help="scripted parser checkpoint (pretrained backend)")
    p.add_argument("--fg-classes", type=int, nargs="+", default=[5, 6, 7, 10, 14, 15],
                   help="parser classes counted as foreground (pretrained backend)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-v", "--verbose", action="store_true")


def _inversion_flags(p):
    p.add_argument("--encoder-steps", type=int, default=200)
    p.add_argument("--pti-steps", type=int, default=3500)
    p.add_argument("--pti-lr", type=float, default=5e-4)
    p.add_argument("--pti-tol", type=float, default=1e-4)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="garmentedit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("invert", help="pivot encoding + generator tuning for one image")
    _common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    _inversion_flags(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("optimize", help="per-image latent optimization toward a prompt")
    _common(p)
    p.add_argument("--latent", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--lambda-clip", type=float, default=1.0)
    p.add_argument("--lambda-l2", type=float, default=1.0)
    p.add_argument("--lambda-id", type=float, default=20.0)
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("train-mapper", help="train a mapper over a folder of latent files")
    _common(p)
    p.add_argument("--config", default=None)
    p.add_argument("--dataset", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--color", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=["text", "plain"], default="text")
    p.add_argument("--optimizer", choices=["ranger", "adam"], default="ranger")
    p.add_argument("--split", type=float, default=0.9)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--no-fine-injection", action="store_true")
    p.add_argument("--no-id-loss", action="store_true")
    p.add_argument("--latent-source", choices=["pti", "e4e", "direct"], default="pti",
                   help="recorded in run metadata only")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("edit", help="apply a trained mapper to an image or latent")
    _common(p)
    p.add_argument("--image", default=None)
    p.add_argument("--latent", default=None)
    p.add_argument("--text", required=True)
    p.add_argument("--color", default=None)
    p.add_argument("--mapper", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--blend", action="store_true",
                   help="copy pixels outside the parsed foreground back from the original")
    p.add_argument("--dry-run", action="store_true")
    _inversion_flags(p)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("evaluate", help="region-restricted FID / SSIM / PSNR / ACD")
    _common(p)
    p.add_argument("--orig", required=True)
    p.add_argument("--edited", required=True)
    p.add_argument("--region", choices=[r.value for r in Region], default="background")
    p.add_argument("--out", required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("replay", help="re-run the command recorded in a manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replay, seed=None, verbose=False)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        result = args.func(args, argv)
    except (CommandError, BackendUnavailableError, FileNotFoundError, ValueError) as exc:
        print(f"garmentedit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return result or 0


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
