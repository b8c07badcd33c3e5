"""Physical-layer simulation: power normalization, AWGN / block Rayleigh
fading, zero-forcing equalization and SNR bookkeeping.

All tensors may carry leading batch dimensions. One channel coefficient is
drawn per transmitted image (block fading), so ``h``, ``snr_db`` and
``noise_var`` have the batch shape while symbol tensors have shape
``(*batch, M)``.

Packing convention: the encoder emits ``2M`` reals laid out as interleaved
``(re, im)`` pairs, i.e. ``raw[..., 2m]`` is the real and ``raw[..., 2m+1]``
the imaginary part of symbol ``m``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch

H_FLOOR = 1e-6


class ChannelKind(str, enum.Enum):
    AWGN = "awgn"
    RAYLEIGH = "rayleigh"

    @classmethod
    def parse(cls, value) -> "ChannelKind":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown channel kind {value!r}; expected 'awgn' or 'rayleigh'") from None


class DegenerateSignalError(ValueError):
    pass


class DeepFadeError(ValueError):
    pass


@dataclass
class ComplexSignal:
    symbols: torch.Tensor  # complex, (*batch, M)
    declared_power: float = 1.0

    @property
    def M(self) -> int:
        return self.symbols.shape[-1]

    def power(self) -> torch.Tensor:
        return self.symbols.abs().pow(2).mean(dim=-1)


@dataclass
class ChannelRealization:
    h: torch.Tensor  # complex, batch shape
    snr_db: torch.Tensor
    noise_var: torch.Tensor
    kind: ChannelKind


@dataclass
class EqualizedSignal:
    symbols: torch.Tensor  # complex, (*batch, M)
    effective_snr_db: torch.Tensor


def normalize_power(raw: torch.Tensor, p_z: float = 1.0) -> ComplexSignal:
    """Pack interleaved reals into complex symbols with mean power exactly ``p_z``.

    Normalization is per leading-batch element, with one positive scale per
    element, so it stays differentiable.
    """
    if p_z <= 0:
        raise ValueError("p_z must be positive")
    if raw.shape[-1] < 2 or raw.shape[-1] % 2:
        raise ValueError(f"expected an even number (>= 2) of reals, got {raw.shape[-1]}")
    pairs = raw.reshape(*raw.shape[:-1], raw.shape[-1] // 2, 2)
    z = torch.complex(pairs[..., 0].contiguous(), pairs[..., 1].contiguous())
    energy = z.real.pow(2).sum(-1) + z.imag.pow(2).sum(-1)
    if bool((energy == 0).any()):
        raise DegenerateSignalError("degenerate signal: all-zero input, power scale undefined")
    M = z.shape[-1]
    scale = torch.sqrt(p_z * M / energy)
    return ComplexSignal(z * scale.unsqueeze(-1), float(p_z))


def unpack_real(z: torch.Tensor) -> torch.Tensor:
    """Inverse of the interleaved packing: ``(*batch, M)`` complex to ``(*batch, 2M)`` real."""
    return torch.view_as_real(z).reshape(*z.shape[:-1], 2 * z.shape[-1])


def noise_variance(snr_db, p_z: float = 1.0):
    if p_z <= 0:
        raise ValueError("p_z must be positive")
    if isinstance(snr_db, torch.Tensor):
        return p_z * torch.pow(torch.as_tensor(10.0, dtype=snr_db.dtype), -snr_db / 10.0)
    return p_z * 10.0 ** (-float(snr_db) / 10.0)


def sample_channel(kind, rng: torch.Generator, size=(), dtype=torch.complex128) -> torch.Tensor:
    """Draw channel coefficients: 1 for AWGN, CN(0, 1) for Rayleigh."""
    kind = ChannelKind.parse(kind)
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    if kind is ChannelKind.AWGN:
        return torch.ones(size, dtype=dtype)
    parts = torch.randn((*size, 2), generator=rng, dtype=real_dtype) * math.sqrt(0.5)
    return torch.complex(parts[..., 0], parts[..., 1])


def realize(kind, snr_db, rng: torch.Generator, p_z: float = 1.0, h_floor: float = H_FLOOR,
            redraw: bool = True) -> tuple[ChannelRealization, int]:
    """Build a single-image realization; deep fades are re-drawn when ``redraw``.

    Returns the realization and the number of re-draws performed.
    """
    kind = ChannelKind.parse(kind)
    redraws = 0
    h = sample_channel(kind, rng)
    while redraw and float(h.abs()) < h_floor:
        redraws += 1
        h = sample_channel(kind, rng)
    snr = torch.as_tensor(float(snr_db), dtype=torch.float64)
    return ChannelRealization(h, snr, noise_variance(snr, p_z), kind), redraws


def stack_realizations(items: list[ChannelRealization]) -> ChannelRealization:
    kinds = {r.kind for r in items}
    if len(kinds) != 1:
        raise ValueError("cannot stack realizations of different channel kinds")
    return ChannelRealization(
        torch.stack([r.h for r in items]),
        torch.stack([r.snr_db for r in items]),
        torch.stack([r.noise_var for r in items]),
        kinds.pop(),
    )


def complex_noise(shape, noise_var: torch.Tensor, rng: torch.Generator, dtype=torch.complex64) -> torch.Tensor:
    """Circular complex Gaussian with per-component variance ``noise_var / 2``."""
    real_dtype = torch.float64 if dtype == torch.complex128 else torch.float32
    parts = torch.randn((*shape, 2), generator=rng, dtype=real_dtype)
    std = torch.sqrt(torch.as_tensor(noise_var, dtype=real_dtype) / 2.0)
    return torch.complex(parts[..., 0], parts[..., 1]) * std


def transmit(z: ComplexSignal | torch.Tensor, ch: ChannelRealization, rng: torch.Generator | None = None,
             noise: torch.Tensor | None = None) -> torch.Tensor:
    """``y = h z + n``. Pass ``noise`` to reuse a fixed draw instead of sampling."""
    sym = z.symbols if isinstance(z, ComplexSignal) else z
    if bool((torch.as_tensor(ch.noise_var) < 0).any()):
        raise ValueError("noise variance must be non-negative")
    h = ch.h.to(sym.dtype).unsqueeze(-1)
    if noise is None:
        if rng is None:
            raise ValueError("transmit needs an rng or an explicit noise draw")
        var = torch.as_tensor(ch.noise_var).unsqueeze(-1)
        noise = complex_noise(sym.shape, var, rng, dtype=sym.dtype)
    return h * sym + noise.to(sym.dtype)


def equalize_zf(y: torch.Tensor, ch: ChannelRealization, h_floor: float = H_FLOOR) -> EqualizedSignal:
    """Zero-forcing ``y / h`` with effective SNR ``snr_db + 10 log10 |h|^2``."""
    if ch.kind is ChannelKind.AWGN:
        return EqualizedSignal(y, ch.snr_db.clone())
    mag2 = ch.h.real.pow(2) + ch.h.imag.pow(2)
    if bool((mag2 < h_floor**2).any()):
        raise DeepFadeError(f"deep fade: |h| below floor {h_floor:g}")
    eff = ch.snr_db + 10.0 * torch.log10(mag2.to(ch.snr_db.dtype))
    return EqualizedSignal(y / ch.h.to(y.dtype).unsqueeze(-1), eff)
