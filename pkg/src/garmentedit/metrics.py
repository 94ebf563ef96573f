"""Region-restricted image metrics: PSNR, SSIM, ACD and FID.

Metrics run in numpy/float64 on detached images. FID values depend on the
feature trunk and are only comparable between runs that share one.
"""

from __future__ import annotations

import enum
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from scipy.ndimage import correlate1d

from .colorspace import EmptyRegionError, masked_mean_lab
from .core import ImageBuffer, RegionMask, mask_background

PSNR_CAP = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
FID_RIDGE = 1e-6


class Region(str, enum.Enum):
    FULL = "full"
    FOREGROUND = "foreground"
    BACKGROUND = "background"


@dataclass
class MetricReport:
    fid: float
    ssim: float
    psnr: float
    acd: float
    region: Region
    n_images: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["region"] = self.region.value
        # FID is undefined for a single pair; JSON has no NaN
        if isinstance(d["fid"], float) and math.isnan(d["fid"]):
            d["fid"] = None
        return d


def _np(img: ImageBuffer) -> np.ndarray:
    return img.pixels.detach().cpu().double().numpy()


def _weights(region: Optional[RegionMask], shape) -> np.ndarray:
    if region is None:
        return np.ones(shape)
    m = region.mask.detach().cpu().double().numpy()
    if m.shape != tuple(shape):
        raise ValueError(f"region shape {m.shape} does not match image {tuple(shape)}")
    if not m.sum() > 0:
        raise EmptyRegionError("region selects no pixels")
    return m


def _check_pair(a: ImageBuffer, b: ImageBuffer) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.range_tag is not b.range_tag:
        raise ValueError("images must share a range tag")


def psnr(a: ImageBuffer, b: ImageBuffer, region: Optional[RegionMask] = None,
         cap: float = PSNR_CAP) -> float:
    """10 log10(MAX^2 / MSE) over the (weighted) region; MAX is the range width."""
    _check_pair(a, b)
    w = _weights(region, a.shape)
    sq = ((_np(a) - _np(b)) ** 2).mean(axis=-1)
    mse = float((sq * w).sum() / w.sum())
    if mse == 0:
        return cap
    peak = a.range_tag.width
    return float(min(cap, 10.0 * np.log10(peak * peak / mse)))


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


def _filter_valid(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter, keeping only windows fully inside the image."""
    y = correlate1d(x, k, axis=0, mode="reflect")
    y = correlate1d(y, k, axis=1, mode="reflect")
    pad = (len(k) - 1) // 2
    return y[pad: x.shape[0] - pad, pad: x.shape[1] - pad]


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    """Per-window SSIM for 2-D arrays, Gaussian window (11, sigma 1.5),
    population statistics; shape (H - 10, W - 10)."""
    k = _gaussian_kernel()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter_valid(a, k), _filter_valid(b, k)
    va = _filter_valid(a * a, k) - mu_a * mu_a
    vb = _filter_valid(b * b, k) - mu_b * mu_b
    cov = _filter_valid(a * b, k) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)
    return num / den


def ssim(a: ImageBuffer, b: ImageBuffer, region: Optional[RegionMask] = None) -> float:
    """Mean local SSIM over windows whose centers fall in the region,
    averaged over the three channels."""
    _check_pair(a, b)
    h, w = a.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"image {a.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    weights = _weights(region, a.shape)
    pad = (SSIM_WINDOW - 1) // 2
    centers = weights[pad: h - pad, pad: w - pad]
    if not centers.sum() > 0:
        raise EmptyRegionError("no SSIM window center lies inside the region")
    xa, xb = _np(a), _np(b)
    rng = a.range_tag.width
    per_channel = [
        float((ssim_map(xa[..., c], xb[..., c], rng) * centers).sum() / centers.sum())
        for c in range(3)
    ]
    return float(np.mean(per_channel))


@torch.no_grad()
def acd(a: ImageBuffer, b: ImageBuffer, region: RegionMask) -> float:
    """L1 distance between the region's mean LAB colors in the two images."""
    _check_pair(a, b)
    ma = masked_mean_lab(ImageBuffer(a.pixels.detach().double(), a.range_tag),
                         RegionMask(region.mask.double()))
    mb = masked_mean_lab(ImageBuffer(b.pixels.detach().double(), b.range_tag),
                         RegionMask(region.mask.double()))
    return float((ma - mb).abs().sum())


def _sqrtm_psd(m: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    return (vecs * np.sqrt(np.clip(vals, 0, None))) @ vecs.T


def fid(features_a, features_b, ridge: float = FID_RIDGE) -> float:
    """Frechet distance between Gaussian fits of two feature sets.

    trace((S_a S_b)^{1/2}) is computed as the sum of square roots of the
    eigenvalues of S_a^{1/2} S_b S_a^{1/2}, which is symmetric; small
    negative eigenvalues from round-off are clamped to zero.
    """
    xa = np.asarray(features_a, dtype=np.float64)
    xb = np.asarray(features_b, dtype=np.float64)
    if xa.ndim != 2 or xb.ndim != 2 or xa.shape[1] != xb.shape[1]:
        raise ValueError("feature sets must be 2-D arrays with equal feature dimension")
    if len(xa) < 2 or len(xb) < 2:
        raise ValueError("FID needs at least 2 samples per set")
    mu_a, mu_b = xa.mean(0), xb.mean(0)
    eye = np.eye(xa.shape[1])
    sa = np.cov(xa, rowvar=False).reshape(eye.shape) + ridge * eye
    sb = np.cov(xb, rowvar=False).reshape(eye.shape) + ridge * eye
    root_a = _sqrtm_psd(sa)
    inner = root_a @ sb @ root_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(np.clip(vals, 0, None)).sum()
    d = float(((mu_a - mu_b) ** 2).sum() + np.trace(sa) + np.trace(sb) - 2 * tr_cross)
    return max(d, 0.0)


def region_mask(region: Region, orig_fg: RegionMask, edited_fg: RegionMask) -> RegionMask:
    """Background = not-foreground in both images; foreground = their union."""
    region = Region(region)
    if region is Region.BACKGROUND:
        return mask_background(orig_fg, edited_fg)
    if region is Region.FOREGROUND:
        return orig_fg | edited_fg
    return RegionMask(torch.ones_like(orig_fg.mask))


class ImageProcessingError(RuntimeError):
    pass


def _score_pair(pid, orig, edited, parser, region, feature_fn):
    try:
        mask = region_mask(region, parser.parse(orig), parser.parse(edited))
    except Exception as exc:
        raise ImageProcessingError(f"parser failed on image {pid}: {exc}") from exc
    m = mask.mask.to(orig.pixels.dtype)[..., None]
    with torch.no_grad():
        fa = _feature_vec(feature_fn, ImageBuffer(orig.pixels.detach() * m, orig.range_tag))
        fb = _feature_vec(feature_fn, ImageBuffer(edited.pixels.detach() * m, edited.range_tag))
    return ssim(orig, edited, mask), psnr(orig, edited, mask), acd(orig, edited, mask), fa, fb


def evaluate_folder(pairs: Sequence, parser, region: Region, feature_fn: Callable,
                    ids: Optional[Sequence[str]] = None, jobs: int = 1) -> MetricReport:
    """Score (orig, edited) pairs restricted to ``region``.

    SSIM / PSNR / ACD are averaged over pairs. FID is computed on pooled
    features of the region-masked images (pixels outside the region set
    to zero) so the feature trunk always sees the full frame.
    """
    if not pairs:
        raise ValueError("no image pairs to evaluate")
    region = Region(region)
    ids = list(ids) if ids is not None else [str(i) for i in range(len(pairs))]
    args = [(pid, o, e, parser, region, feature_fn) for pid, (o, e) in zip(ids, pairs)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scored = list(pool.map(lambda a: _score_pair(*a), args))
    else:
        scored = [_score_pair(*a) for a in args]
    s_vals, p_vals, a_vals, fa, fb = (list(col) for col in zip(*scored))
    n = len(pairs)
    fid_val = fid(np.stack(fa), np.stack(fb)) if n >= 2 else float("nan")
    return MetricReport(
        fid=fid_val,
        ssim=float(np.mean(s_vals)),
        psnr=float(np.mean(p_vals)),
        acd=float(np.mean(a_vals)),
        region=region,
        n_images=n,
    )


def _feature_vec(feature_fn, image: ImageBuffer) -> np.ndarray:
    return np.asarray(torch.as_tensor(feature_fn(image)).detach().cpu().double().reshape(-1))
