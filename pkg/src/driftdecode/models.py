"""Trainable networks: the JSCC encoder and the SNR-conditioned one-step
U-Net decoder.

Decoder input layout: the ``M`` equalized complex symbols are zero-padded to
``c' * h' * w'`` (``h' = H / 4``, ``w' = W / 4``, ``c' = ceil(M / (h' w'))``),
real and imaginary parts are each reshaped to ``(c', h', w')`` and stacked
as two channel groups ``[re..., im...]``.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng as rngmod
from .channel import ComplexSignal, EqualizedSignal, normalize_power

LATENT_STRIDE = 4


@dataclass
class ModelConfig:
    image_shape: tuple = (1, 32, 32)
    cbr: float = 1.0
    base_width: int = 32
    depth: int = 2
    embed_dim: int = 64
    film_hidden: int = 128
    enc_width: int = 64
    p_z: float = 1.0

    def __post_init__(self):
        self.image_shape = tuple(int(v) for v in self.image_shape)
        if len(self.image_shape) != 3:
            raise ValueError(f"image_shape must be (C, H, W), got {self.image_shape}")
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        for name in ("base_width", "embed_dim", "film_hidden", "enc_width"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.M < 1:
            raise ValueError(f"cbr={self.cbr} gives no channel symbols for {self.image_shape}")
        _, H, W = self.image_shape
        unit = math.lcm(LATENT_STRIDE, 2 ** (self.depth - 1))
        if H % unit or W % unit:
            raise ValueError(f"H and W must be multiples of {unit} for depth {self.depth}")

    @property
    def M(self) -> int:
        C, H, W = self.image_shape
        return int(round(self.cbr * C * H * W))

    @property
    def latent_hw(self) -> tuple:
        _, H, W = self.image_shape
        return H // LATENT_STRIDE, W // LATENT_STRIDE

    def to_dict(self) -> dict:
        d = asdict(self)
        d["image_shape"] = list(self.image_shape)
        return d


def _groups(channels: int, max_groups: int = 8) -> int:
    return math.gcd(max_groups, channels)


class SnrEmbedding(nn.Module):
    """Sinusoidal features of gamma (dB) followed by a 2-layer MLP.

    ``embed_dim // 2`` angular frequencies are spaced geometrically from
    2*pi/40 to 2*pi*4 rad/dB, so the raw feature vector has ``2 * (embed_dim // 2)``
    entries.
    """

    def __init__(self, embed_dim: int = 64, hidden: int = 128):
        super().__init__()
        n = max(1, embed_dim // 2)
        freqs = torch.logspace(math.log10(2 * math.pi / 40), math.log10(2 * math.pi * 4), n)
        self.register_buffer("freqs", freqs)
        self.mlp = nn.Sequential(nn.Linear(2 * n, hidden), nn.SiLU(), nn.Linear(hidden, embed_dim))

    def features(self, gamma_db: torch.Tensor) -> torch.Tensor:
        arg = gamma_db.to(self.freqs.dtype).unsqueeze(-1) * self.freqs
        return torch.cat([torch.cos(arg), torch.sin(arg)], dim=-1)

    def forward(self, gamma_db: torch.Tensor) -> torch.Tensor:
        return self.mlp(self.features(gamma_db))


class FiLM(nn.Module):
    """``alpha(e) * Norm(h) + beta(e)`` with ``alpha = 1 + proj_alpha(e)``."""

    def __init__(self, channels: int, embed_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels, affine=False)
        self.proj = nn.Linear(embed_dim, 2 * channels)

    def forward(self, h, e):
        alpha, beta = self.proj(e).chunk(2, dim=-1)
        return (1 + alpha)[..., None, None] * self.norm(h) + beta[..., None, None]


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int):
        super().__init__()
        self.film1 = FiLM(c_in, embed_dim)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.film2 = FiLM(c_out, embed_dim)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x, e):
        h = self.conv1(F.silu(self.film1(x, e)))
        h = self.conv2(F.silu(self.film2(h, e)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Four strided conv stages (strides 2, 2, 1, 1) and a head emitting exactly 2M reals."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, _, _ = cfg.image_shape
        w = cfg.enc_width
        hh, ww = cfg.latent_hw
        self.M = cfg.M
        self.p_z = cfg.p_z
        self.image_shape = cfg.image_shape
        self.out_channels = math.ceil(2 * self.M / (hh * ww))
        self.net = nn.Sequential(
            nn.Conv2d(C, w, 5, stride=2, padding=2), nn.PReLU(w),
            nn.Conv2d(w, w, 5, stride=2, padding=2), nn.PReLU(w),
            nn.Conv2d(w, w, 3, padding=1), nn.PReLU(w),
            nn.Conv2d(w, w, 3, padding=1), nn.PReLU(w),
            nn.Conv2d(w, self.out_channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if tuple(x.shape[-3:]) != self.image_shape:
            raise ValueError(f"encoder expects images of shape {self.image_shape}, got {tuple(x.shape[-3:])}")
        raw = self.net(x).flatten(-3)
        return raw[..., : 2 * self.M]


class Decoder(nn.Module):
    """One-step U-Net; FiLM with the SNR embedding in every residual block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        C, H, W = cfg.image_shape
        self.cfg = cfg
        self.M = cfg.M
        hh, ww = cfg.latent_hw
        self.latent_channels = math.ceil(self.M / (hh * ww))
        widths = [cfg.base_width * 2**i for i in range(cfg.depth)]
        b, D = cfg.base_width, cfg.embed_dim
        self.embed = SnrEmbedding(D, cfg.film_hidden)
        self.stem = nn.Conv2d(2 * self.latent_channels, b, 3, padding=1)
        self.lift = nn.ModuleList([nn.Conv2d(b, b, 3, padding=1) for _ in range(int(math.log2(LATENT_STRIDE)))])
        self.down_blocks = nn.ModuleList()
        self.downsample = nn.ModuleList()
        c = b
        for i, w in enumerate(widths):
            self.down_blocks.append(nn.ModuleList([ResBlock(c, w, D), ResBlock(w, w, D)]))
            c = w
            if i < cfg.depth - 1:
                self.downsample.append(nn.Conv2d(w, widths[i + 1], 3, stride=2, padding=1))
                c = widths[i + 1]
        self.up_blocks = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for i in reversed(range(cfg.depth)):
            w = widths[i]
            self.up_blocks.append(nn.ModuleList([ResBlock(c + w, w, D), ResBlock(w, w, D)]))
            c = w
            if i > 0:
                self.upsample.append(nn.Conv2d(w, widths[i - 1], 3, padding=1))
                c = widths[i - 1]
        self.out_norm = nn.GroupNorm(_groups(c), c)
        self.out_conv = nn.Conv2d(c, C, 3, padding=1)
        self.forward_calls = 0

    def to_input(self, symbols: torch.Tensor) -> torch.Tensor:
        if symbols.shape[-1] != self.M:
            raise ValueError(f"decoder expects {self.M} symbols, got {symbols.shape[-1]}")
        hh, ww = self.cfg.latent_hw
        pad = self.latent_channels * hh * ww - self.M
        parts = []
        for part in (symbols.real, symbols.imag):
            part = F.pad(part, (0, pad))
            parts.append(part.reshape(*part.shape[:-1], self.latent_channels, hh, ww))
        return torch.cat(parts, dim=-3)

    def forward(self, symbols: torch.Tensor, gamma_db: torch.Tensor) -> torch.Tensor:
        self.forward_calls += 1
        x = self.to_input(symbols)
        e = self.embed(gamma_db.to(x.dtype))
        x = self.stem(x)
        for conv in self.lift:
            x = F.silu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        skips = []
        for i, (r1, r2) in enumerate(self.down_blocks):
            x = r2(r1(x, e), e)
            skips.append(x)
            if i < len(self.downsample):
                x = self.downsample[i](x)
        for i, (r1, r2) in enumerate(self.up_blocks):
            x = torch.cat([x, skips.pop()], dim=-3)
            x = r2(r1(x, e), e)
            if i < len(self.upsample):
                x = self.upsample[i](F.interpolate(x, scale_factor=2, mode="nearest"))
        x = self.out_conv(F.silu(self.out_norm(x)))
        return torch.sigmoid(x).clamp(0.0, 1.0)


class JSCCSystem(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = Decoder(cfg)


def build_system(cfg: ModelConfig, seed: int = 0) -> JSCCSystem:
    """Deterministic initialization from ``seed`` without touching global RNG state."""
    g = rngmod.torch_stream(seed, rngmod.PURPOSE_INIT)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(g.initial_seed()))
        return JSCCSystem(cfg)


def encode(encoder: Encoder, x: torch.Tensor) -> ComplexSignal:
    return normalize_power(encoder(x), encoder.p_z)


def decode(decoder: Decoder, y_eq: EqualizedSignal | torch.Tensor, gamma_db=None) -> torch.Tensor:
    """Single forward pass; ``gamma_db`` defaults to the effective SNR."""
    if isinstance(y_eq, EqualizedSignal):
        symbols = y_eq.symbols
        if gamma_db is None:
            gamma_db = y_eq.effective_snr_db
    else:
        symbols = y_eq
    if gamma_db is None:
        raise ValueError("decode needs gamma_db")
    gamma = torch.as_tensor(gamma_db)
    if not bool(torch.isfinite(gamma).all()):
        raise ValueError("gamma_db must be finite")
    real_dtype = symbols.real.dtype
    gamma = gamma.to(real_dtype).expand(symbols.shape[:-1])
    return decoder(symbols, gamma)


def conv_flops(c_in: int, c_out: int, k, h_out: int, w_out: int, groups: int = 1) -> int:
    """2 * multiply-accumulates for one image; ``k`` is an int or (kh, kw)."""
    kh, kw = (k, k) if isinstance(k, int) else k
    return 2 * (c_in // groups) * kh * kw * c_out * h_out * w_out


@contextmanager
def _flop_hooks(module: nn.Module, counter: list):
    def on_conv(m, inp, out):
        counter[0] += conv_flops(m.in_channels, m.out_channels, m.kernel_size, out.shape[-2], out.shape[-1], m.groups)

    def on_linear(m, inp, out):
        counter[0] += 2 * m.in_features * m.out_features * (out.numel() // out.shape[-1])

    handles = []
    for m in module.modules():
        if isinstance(m, nn.Conv2d):
            handles.append(m.register_forward_hook(on_conv))
        elif isinstance(m, nn.Linear):
            handles.append(m.register_forward_hook(on_linear))
    try:
        yield
    finally:
        for h in handles:
            h.remove()


def count_flops(cfg: ModelConfig) -> tuple[float, float]:
    """(encoder GFLOPs, decoder GFLOPs) per image, convolutions and linears only."""
    with torch.device("meta"):
        system = JSCCSystem(cfg)
        x = torch.zeros(1, *cfg.image_shape)
        enc, dec = [0], [0]
        with torch.no_grad():
            with _flop_hooks(system.encoder, enc):
                raw = system.encoder(x)
            sym = torch.complex(raw[..., 0::2], raw[..., 1::2])
            with _flop_hooks(system.decoder, dec):
                system.decoder(sym, torch.zeros(1))
    return enc[0] / 1e9, dec[0] / 1e9
