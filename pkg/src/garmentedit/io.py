"""On-disk formats: latent files, PNG images, CSV logs, JSON reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import ImageBuffer, LatentCode, RangeTag, SpaceTag


def latent_paths(path) -> tuple[Path, Path]:
    """A latent lives in ``<stem>.bin`` (little-endian float32, row-major
    (L, D)) next to a ``<stem>.json`` header {L, D, space_tag, seed}."""
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".bin", ".json") else p
    return stem.with_suffix(".bin"), stem.with_suffix(".json")


def save_latent(code: LatentCode, path, seed: int = 0) -> Path:
    bin_path, json_path = latent_paths(path)
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    arr = code.values.detach().cpu().numpy().astype("<f4", copy=False)
    bin_path.write_bytes(np.ascontiguousarray(arr).tobytes())
    header = {"L": code.L, "D": code.D, "space_tag": code.space_tag.value, "seed": int(seed)}
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    return bin_path


def load_latent(path, dtype=torch.float32) -> tuple[LatentCode, dict]:
    bin_path, json_path = latent_paths(path)
    if not bin_path.exists():
        raise FileNotFoundError(f"latent file not found: {bin_path}")
    if not json_path.exists():
        raise FileNotFoundError(f"latent header not found: {json_path}")
    header = json.loads(json_path.read_text())
    missing = {"L", "D", "space_tag", "seed"} - set(header)
    if missing:
        raise ValueError(f"latent header {json_path} lacks {sorted(missing)}")
    L, D = int(header["L"]), int(header["D"])
    raw = np.frombuffer(bin_path.read_bytes(), dtype="<f4")
    if raw.size != L * D:
        raise ValueError(f"{bin_path} holds {raw.size} floats, header says {L}x{D}")
    values = torch.from_numpy(raw.reshape(L, D).astype(np.float32)).to(dtype)
    return LatentCode(values, SpaceTag(header["space_tag"])), header


def list_latents(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    return sorted(p for p in d.glob("*.bin") if p.with_suffix(".json").exists())


def save_png(image: ImageBuffer, path) -> None:
    px = image.to_unit().pixels.detach().cpu().clamp(0, 1).numpy()
    arr = np.round(px * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_png(path, dtype=torch.float32, range_tag=RangeTag.SIGNED_UNIT) -> ImageBuffer:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"image not found: {p}")
    arr = np.asarray(Image.open(p).convert("RGB"), dtype=np.float64) / 255.0
    img = ImageBuffer(torch.from_numpy(arr).to(dtype), RangeTag.UNIT)
    return img if range_tag is RangeTag.UNIT else img.to_signed()


def write_history_csv(path, rows) -> None:
    """Write (step, term, value) rows."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "term", "value"])
        for step, term, value in rows:
            writer.writerow([step, term, repr(float(value))])


def read_history_csv(path) -> list[tuple[int, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["step"]), r["term"], float(r["value"])) for r in reader]


def write_json(path, data) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
