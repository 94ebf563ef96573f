"""Mapper training over a set of precomputed latent codes."""

from __future__ import annotations

import json
import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import torch

from .backends import Backends
from .core import EditConfig, ImageBuffer, LatentCode, RegionMask, TextCondition
from .inversion import NonFiniteLossError
from .losses import LossReport, clip_term, total_loss_styleclip, total_loss_tdgem
from .mapper import PlainMapper, TextMapper, mapper_residual

log = logging.getLogger(__name__)


class TrainingDivergedError(NonFiniteLossError):
    def __init__(self, step: int, sample_id: str):
        super().__init__(f"non-finite loss at step {step} on sample {sample_id!r}")
        self.step = step
        self.sample_id = sample_id


@dataclass
class LatentDataset:
    items: list  # [(id, LatentCode)]
    train: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def __post_init__(self):
        if set(self.train) & set(self.test):
            raise ValueError("train and test splits overlap")

    def train_items(self):
        return [self.items[i] for i in self.train]

    def test_items(self):
        return [self.items[i] for i in self.test]


def split_dataset(items, ratio: float = 0.9, seed: int = 0) -> LatentDataset:
    """Seeded shuffle, then the first round(ratio * n) items go to training.

    With two or more items both splits keep at least one element.
    """
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError("ratio must lie strictly between 0 and 1")
    n = len(items)
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_train = math.floor(ratio * n + 0.5)
    if n >= 2:
        n_train = min(max(n_train, 1), n - 1)
    return LatentDataset(items, sorted(order[:n_train]), sorted(order[n_train:]))


class Lookahead:
    """Lookahead wrapper: every ``k`` inner steps pull the slow weights
    ``alpha`` of the way toward the fast ones and reset the fast weights."""

    def __init__(self, base: torch.optim.Optimizer, k: int = 6, alpha: float = 0.5):
        self.base = base
        self.k = k
        self.alpha = alpha
        self.counter = 0
        self.slow = [p.detach().clone() for g in base.param_groups for p in g["params"]]

    @property
    def param_groups(self):
        return self.base.param_groups

    def zero_grad(self, set_to_none: bool = True):
        self.base.zero_grad(set_to_none=set_to_none)

    @torch.no_grad()
    def step(self):
        self.base.step()
        self.counter += 1
        if self.counter % self.k == 0:
            params = [p for g in self.base.param_groups for p in g["params"]]
            for p, s in zip(params, self.slow):
                s.add_(p - s, alpha=self.alpha)
                p.copy_(s)

    def state_dict(self):
        return {"base": self.base.state_dict(), "slow": [s.clone() for s in self.slow],
                "counter": self.counter, "k": self.k, "alpha": self.alpha}

    def load_state_dict(self, state):
        self.base.load_state_dict(state["base"])
        for s, saved in zip(self.slow, state["slow"]):
            s.copy_(saved)
        self.counter = state["counter"]


def make_optimizer(params, lr: float, name: str = "ranger"):
    """``ranger`` = rectified Adam inside Lookahead; ``adam`` = plain Adam."""
    params = list(params)
    if name == "ranger":
        return Lookahead(torch.optim.RAdam(params, lr=lr, betas=(0.95, 0.999)))
    if name == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {name!r}")


def build_mapper(kind: str, cfg: EditConfig, latent_dim: int, embed_dim: int,
                 dtype=torch.float32):
    torch.manual_seed(cfg.seed)
    if kind == "text":
        m = TextMapper(cfg.partition, latent_dim, embed_dim, inject_fine=cfg.inject_fine)
    elif kind == "plain":
        m = PlainMapper(cfg.partition, latent_dim)
    else:
        raise ValueError(f"unknown mapper kind {kind!r}")
    return m.to(dtype)


def mapper_loss(mapper, w: torch.Tensor, cond: TextCondition, cfg: EditConfig,
                backends: Backends, orig: Optional[ImageBuffer] = None) -> LossReport:
    delta = mapper_residual(mapper, w, cond)
    if not torch.isfinite(delta.detach()).all():
        raise NonFiniteLossError("mapper produced a non-finite residual")
    if isinstance(mapper, TextMapper):
        return total_loss_tdgem(w, delta, cond, cfg.weights, backends,
                                use_id_loss=cfg.use_id_loss, orig=orig)
    weights = cfg.weights if cfg.use_id_loss else _without_id(cfg.weights)
    return total_loss_styleclip(w, delta, cond.shape_embedding, weights, backends, orig=orig)


def _without_id(weights):
    from dataclasses import replace
    return replace(weights, lambda_id=0.0)


@dataclass
class TrainResult:
    mapper: torch.nn.Module
    log: list = field(default_factory=list)
    steps: int = 0


def train_mapper(dataset: LatentDataset, cond: TextCondition, cfg: EditConfig, backends: Backends,
                 kind: str = "text", mapper=None, optimizer: str = "ranger",
                 out_dir=None) -> TrainResult:
    """Batch-size-one training loop over the training split.

    Each epoch visits the training codes in a freshly seeded order. One log
    row per step holds the sample id, total and unweighted terms. When
    ``out_dir`` is given, checkpoints are written every
    ``cfg.checkpoint_every`` steps, plus ``best.pt`` (lowest mean loss over
    a checkpoint window) and ``final.pt``.
    """
    train = dataset.train_items()
    if not train:
        raise ValueError("training split is empty")
    G = backends.generator
    dtype = next(iter(G.parameters())).dtype
    if mapper is None:
        mapper = build_mapper(kind, cfg, G.latent_dim, backends.encoder.embed_dim, dtype)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[dict] = []
    if cfg.max_steps == 0:
        return TrainResult(mapper, rows, 0)

    torch.manual_seed(cfg.seed)
    rng = random.Random(cfg.seed)
    opt = make_optimizer(mapper.parameters(), cfg.learning_rate, optimizer)
    frozen = [p for p in G.parameters() if p.requires_grad]
    for p in frozen:
        p.requires_grad_(False)
    try:
        _run_steps(mapper, opt, train, rng, cond, cfg, backends, dtype, out, rows)
    finally:
        for p in frozen:
            p.requires_grad_(True)
    mapper.eval()
    if out is not None:
        save_mapper(out / "final.pt", mapper, cfg, step=cfg.max_steps)
    return TrainResult(mapper, rows, cfg.max_steps)


def _run_steps(mapper, opt, train, rng, cond, cfg, backends, dtype, out, rows):
    G = backends.generator
    originals = {}
    order: list[int] = []
    window: list[float] = []
    best_window = math.inf
    mapper.train()
    for step in range(cfg.max_steps):
        if not order:
            order = list(range(len(train)))
            rng.shuffle(order)
        sample_id, code = train[order.pop()]
        w = code.values.to(dtype)
        if sample_id not in originals:
            with torch.no_grad():
                originals[sample_id] = G.synthesize(LatentCode(w))
        try:
            report = mapper_loss(mapper, w, cond, cfg, backends, orig=originals[sample_id])
            terms = report.terms
            finite = math.isfinite(report.value)
        except NonFiniteLossError:
            terms, finite = {}, False
        if not finite:
            if out is not None:
                (out / "diverged.json").write_text(json.dumps(
                    {"step": step, "sample_id": sample_id, "terms": terms}, indent=2))
            raise TrainingDivergedError(step, sample_id)
        opt.zero_grad()
        report.total.backward()
        opt.step()
        rows.append({"step": step, "sample_id": sample_id, "total": report.value,
                     **report.terms, "weights": report.weights})
        window.append(report.value)
        if out is not None and (step + 1) % cfg.checkpoint_every == 0:
            save_mapper(out / f"checkpoint_{step + 1:06d}.pt", mapper, cfg, step=step + 1)
            mean = sum(window) / len(window)
            if mean < best_window:
                best_window = mean
                save_mapper(out / "best.pt", mapper, cfg, step=step + 1)
            window = []
        if step % 100 == 0:
            log.debug("step %d total %.5f", step, report.value)


def log_rows_to_scalars(rows) -> list[tuple[int, str, float]]:
    """Flatten a training log into (step, term, value) scalars."""
    out = []
    for r in rows:
        for key in ("total", "clip", "norm", "id", "color", "bg"):
            if key in r:
                out.append((r["step"], key, r[key]))
    return out


def save_mapper(path, mapper, cfg: EditConfig, **meta) -> None:
    """Self-describing checkpoint: parameters, mapper layout and the config."""
    payload = {
        "format": "garmentedit-mapper/1",
        "kind": mapper.kind,
        "latent_dim": mapper.latent_dim,
        "embed_dim": getattr(mapper, "embed_dim", None),
        "color_split": getattr(mapper, "color_split", None),
        "config": cfg.to_dict(),
        "state_dict": {k: v.detach().clone() for k, v in mapper.state_dict().items()},
        "meta": meta,
    }
    torch.save(payload, path)


def load_mapper(path, generator=None):
    """Load a mapper checkpoint; returns ``(mapper, cfg)``. When a generator
    is given its latent layout must match the checkpoint."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mapper checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != "garmentedit-mapper/1":
        raise ValueError(f"{path} is not a mapper checkpoint")
    cfg = EditConfig.from_dict(payload["config"])
    if generator is not None and (generator.num_layers, generator.latent_dim) != (
            cfg.partition.num_layers, payload["latent_dim"]):
        raise ValueError(
            f"mapper layout ({cfg.partition.num_layers}, {payload['latent_dim']}) does not "
            f"match generator ({generator.num_layers}, {generator.latent_dim})"
        )
    if payload["kind"] == "text":
        mapper = TextMapper(cfg.partition, payload["latent_dim"], payload["embed_dim"],
                            inject_fine=cfg.inject_fine, color_split=payload["color_split"])
    else:
        mapper = PlainMapper(cfg.partition, payload["latent_dim"])
    state = payload["state_dict"]
    mapper = mapper.to(next(iter(state.values())).dtype)
    mapper.load_state_dict(state)
    mapper.eval()
    return mapper, cfg


@torch.no_grad()
def apply_edit(mapper, w: LatentCode, cond: Optional[TextCondition], generator):
    """Edited image and edited code w + mapper(w, cond)."""
    if (w.L, w.D) != (generator.num_layers, generator.latent_dim):
        raise ValueError(
            f"code shape ({w.L}, {w.D}) does not match generator "
            f"({generator.num_layers}, {generator.latent_dim})"
        )
    dtype = next(iter(generator.parameters())).dtype
    values = w.values.to(dtype)
    delta = mapper_residual(mapper, values, cond).to(dtype)
    edited = LatentCode(values + delta, w.space_tag)
    return generator.synthesize(edited), edited


def blend_preserved_regions(orig: ImageBuffer, edited: ImageBuffer, preserve: RegionMask) -> ImageBuffer:
    """Per-pixel convex blend: preserve * orig + (1 - preserve) * edited."""
    if orig.shape != edited.shape or preserve.shape != orig.shape:
        raise ValueError(
            f"shape mismatch: orig {orig.shape}, edited {edited.shape}, mask {preserve.shape}"
        )
    if orig.range_tag is not edited.range_tag:
        edited = edited.to_unit() if orig.range_tag.value == "UNIT" else edited.to_signed()
    m = preserve.mask.to(orig.pixels.dtype)[..., None]
    return ImageBuffer(m * orig.pixels + (1 - m) * edited.pixels, orig.range_tag)


@torch.no_grad()
def mean_clip_term(mapper, items, cond: TextCondition, backends: Backends) -> float:
    """Average clip term of the edited images over ``items``."""
    vals = []
    for _, code in items:
        edited, _ = apply_edit(mapper, code, cond, backends.generator)
        vals.append(float(clip_term(edited, cond, backends.encoder)))
    return sum(vals) / len(vals)
