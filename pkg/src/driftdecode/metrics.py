"""Reconstruction-quality metrics for images in [0, 1]."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

from .driftfield import flatten_locations, normalize_rows
from .features import extract

DB_CAP = 99.0
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
K1, K2 = 0.01, 0.03


@dataclass
class MetricReport:
    psnr_db: float
    msssim: float
    msssim_db: float
    feat_dist: float
    snr_db: float
    n_images: int
    channel: str = ""

    def as_row(self) -> dict:
        return asdict(self)


def _check_shapes(x, y):
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(y.shape)}")


def psnr(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 1.0) -> float:
    """PSNR in dB over the whole tensor; identical inputs give ``DB_CAP``."""
    _check_shapes(x, x_hat)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float((x.double() - x_hat.double()).pow(2).mean())
    if mse == 0:
        return DB_CAP
    return min(DB_CAP, 10.0 * math.log10(peak**2 / mse))


def psnr_per_image(x: torch.Tensor, x_hat: torch.Tensor, peak: float = 1.0) -> torch.Tensor:
    _check_shapes(x, x_hat)
    mse = (x.double() - x_hat.double()).pow(2).flatten(1).mean(1)
    out = 10.0 * torch.log10(peak**2 / mse)
    return torch.where(mse == 0, torch.full_like(out, DB_CAP), out.clamp(max=DB_CAP))


def msssim_db(v: float) -> float:
    if not 0.0 <= v <= 1.0:
        raise ValueError(f"MS-SSIM value {v} outside [0, 1]")
    if v == 1.0:
        return DB_CAP
    return min(DB_CAP, -10.0 * math.log1p(-v) / math.log(10.0))


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float64) -> torch.Tensor:
    coords = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(coords**2) / (2 * sigma**2))
    return g / g.sum()


def default_scales(h: int, w: int) -> tuple[int, int]:
    """(n_scales, window size): 5 x 11 from 176 px up, otherwise 3 scales with a 7-tap window."""
    if min(h, w) >= 176:
        return 5, 11
    return 3, 7


def _ssim_terms(x, y, win, data_range):
    # x, y: (N, C, H, W); valid filtering with a separable window.
    C = x.shape[1]
    k = win.numel()
    wh = win.view(1, 1, 1, k).expand(C, 1, 1, k)
    wv = win.view(1, 1, k, 1).expand(C, 1, k, 1)

    def blur(t):
        return F.conv2d(F.conv2d(t, wh, groups=C), wv, groups=C)

    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    mu_x, mu_y = blur(x), blur(y)
    sxx = blur(x * x) - mu_x**2
    syy = blur(y * y) - mu_y**2
    sxy = blur(x * y) - mu_x * mu_y
    cs = (2 * sxy + c2) / (sxx + syy + c2)
    lum = (2 * mu_x * mu_y + c1) / (mu_x**2 + mu_y**2 + c1)
    return (lum * cs).flatten(2).mean(-1), cs.flatten(2).mean(-1)


def ms_ssim(x: torch.Tensor, x_hat: torch.Tensor, n_scales: int | None = None, win_size: int | None = None,
            data_range: float = 1.0, reduce: bool = True):
    """Multi-scale SSIM of ``(C, H, W)`` or ``(N, C, H, W)`` images.

    Contrast-structure terms are taken at every scale but the last, where the
    full SSIM (luminance included) is used; scales are combined as a weighted
    geometric product with the standard exponents (renormalized when fewer
    than five scales are used). Negative per-scale terms are clipped to 0.
    Returns the mean over images (and channels) unless ``reduce`` is false.
    """
    _check_shapes(x, x_hat)
    if x.dim() == 3:
        x, x_hat = x.unsqueeze(0), x_hat.unsqueeze(0)
    H, W = x.shape[-2:]
    d_scales, d_win = default_scales(H, W)
    n_scales = n_scales or d_scales
    win_size = win_size or (d_win if n_scales == d_scales else 11)
    if not 1 <= n_scales <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"n_scales must be in 1..{len(MSSSIM_WEIGHTS)}")
    need = 2 ** (n_scales - 1) * win_size
    if min(H, W) < need:
        raise ValueError(
            f"image {H}x{W} too small for {n_scales} scales with a {win_size}-tap window "
            f"(needs {need} px); use a smaller n_scales"
        )
    weights = torch.tensor(MSSSIM_WEIGHTS[:n_scales], dtype=torch.float64)
    weights = weights / weights.sum()
    win = gaussian_window(win_size)
    a, b = x.double(), x_hat.double()
    terms = []
    for s in range(n_scales):
        ssim_s, cs_s = _ssim_terms(a, b, win, data_range)
        terms.append(ssim_s if s == n_scales - 1 else cs_s)
        if s < n_scales - 1:
            a, b = F.avg_pool2d(a, 2), F.avg_pool2d(b, 2)
    stacked = torch.stack(terms, dim=-1).clamp_min(0.0)
    per_channel = torch.prod(stacked ** weights, dim=-1)
    per_image = per_channel.mean(-1).clamp(max=1.0)
    return float(per_image.mean()) if reduce else per_image


@torch.no_grad()
def feature_distance(x: torch.Tensor, x_hat: torch.Tensor, extractor, reduce: bool = True):
    """Mean squared distance between unit-normalized feature rows, averaged over layers.

    An in-repo perceptual proxy; not calibrated LPIPS.
    """
    _check_shapes(x, x_hat)
    px, py = extract(extractor, x), extract(extractor, x_hat)
    total = None
    for a, b in zip(px.maps.values(), py.maps.values()):
        fa = normalize_rows(flatten_locations(a))
        fb = normalize_rows(flatten_locations(b))
        d = (fa - fb).pow(2).sum(-1).mean(-1)
        total = d if total is None else total + d
    total = total / len(px)
    if reduce:
        return float(total.double().mean())
    return total


def cbr(M: int, C: int, H: int, W: int) -> float:
    if min(M, C, H, W) <= 0:
        raise ValueError("all sizes must be positive")
    return M / (C * H * W)
