"""Frozen perceptual feature pyramids.

Two extractor kinds share one interface:

* ``fixed_random``: a small convolutional pyramid with seeded random weights.
  Stage ``i`` (named ``L{i}``) is ``conv3x3/stride2 -> SiLU -> conv3x3 -> SiLU``;
  widths default to 16/32/64. Weights are drawn from a PCG64 stream keyed
  by the seed (see :mod:`driftdecode.rng`), in layer order, weight before bias:
  ``W ~ N(0, 2 / fan_in)``, ``b ~ N(0, 0.1^2)``. No input normalization.
* ``pretrained_archive``: VGG-19 convolution stack (``conv{block}_{index}``
  naming, ReLU after every conv, 2x2 max-pool between blocks) loaded from a
  named-tensor archive holding ``<layer>.weight`` / ``<layer>.bias``. Channel
  widths come from the stored tensors. Optional archive metadata ``mean`` and
  ``std`` (per channel) normalize inputs in [0, 1].

Feature maps are taken after the nonlinearity. Grayscale inputs are repeated
across channels when the extractor expects more.
"""

from __future__ import annotations

import enum
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng as rngmod
from .archive import ArchiveError, load_archive

VGG19_BLOCKS = (2, 2, 4, 4, 4)
VGG19_LAYERS = tuple(f"conv{b + 1}_{i + 1}" for b, n in enumerate(VGG19_BLOCKS) for i in range(n))
VGG_LAYERS = ("conv2_2", "conv3_4", "conv4_4")


class ExtractorKind(str, enum.Enum):
    FIXED_RANDOM = "fixed_random"
    PRETRAINED_ARCHIVE = "pretrained_archive"


@dataclass
class ExtractorSpec:
    kind: ExtractorKind = ExtractorKind.FIXED_RANDOM
    layers: tuple = ("L1", "L2", "L3")
    seed: int = 0
    archive_path: str | None = None
    input_range: tuple = (0.0, 1.0)
    in_channels: int = 3
    widths: tuple = (16, 32, 64)

    def __post_init__(self):
        self.kind = ExtractorKind(self.kind)
        self.layers = tuple(self.layers)
        if not self.layers:
            raise ValueError("extractor needs at least one layer")
        if len(set(self.layers)) != len(self.layers):
            raise ValueError(f"duplicate layer identifiers in {self.layers}")


@dataclass
class FeaturePyramid:
    maps: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    @property
    def K(self) -> dict:
        return {name: m.shape[-1] * m.shape[-2] for name, m in self.maps.items()}

    def __len__(self):
        return len(self.maps)


class Extractor(nn.Module):
    """Base class: a frozen stack of named stages."""

    in_channels: int
    layers: tuple

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()
        return self

    def train(self, mode: bool = True):
        # Always stays in eval mode.
        return super().train(False)

    def prepare(self, image: torch.Tensor) -> torch.Tensor:
        if image.shape[-3] == 1 and self.in_channels > 1:
            image = image.expand(*image.shape[:-3], self.in_channels, *image.shape[-2:])
        elif image.shape[-3] != self.in_channels:
            raise ValueError(f"extractor expects {self.in_channels} channels, got {image.shape[-3]}")
        return image


class FixedRandomExtractor(Extractor):
    def __init__(self, seed: int, layers, in_channels: int = 3, widths=(16, 32, 64)):
        super().__init__()
        self.in_channels = in_channels
        self.stage_names = tuple(f"L{i + 1}" for i in range(len(widths)))
        unknown = [name for name in layers if name not in self.stage_names]
        if unknown:
            raise ValueError(f"unknown layers {unknown}; fixed_random provides {self.stage_names}")
        self.layers = tuple(layers)
        gen = rngmod.numpy_stream(seed, rngmod.PURPOSE_EXTRACTOR)
        self.convs = nn.ModuleList()
        c_in = in_channels
        for w in widths:
            for conv in (nn.Conv2d(c_in, w, 3, stride=2, padding=1), nn.Conv2d(w, w, 3, padding=1)):
                fan_in = conv.in_channels * 9
                weight = gen.standard_normal(conv.weight.shape) * math.sqrt(2.0 / fan_in)
                bias = gen.standard_normal(conv.bias.shape) * 0.1
                conv.weight.data = torch.from_numpy(weight).float()
                conv.bias.data = torch.from_numpy(bias).float()
                self.convs.append(conv)
            c_in = w
        self.depth = self.stage_names.index(max(self.layers, key=self.stage_names.index)) + 1
        self.freeze()

    def forward(self, x):
        out = OrderedDict()
        for i in range(self.depth):
            x = F.silu(self.convs[2 * i](x))
            x = F.silu(self.convs[2 * i + 1](x))
            name = self.stage_names[i]
            if name in self.layers:
                out[name] = x
        return OrderedDict((name, out[name]) for name in self.layers)


class VGGArchiveExtractor(Extractor):
    def __init__(self, path, layers):
        super().__init__()
        path = Path(path)
        unknown = [name for name in layers if name not in VGG19_LAYERS]
        if unknown:
            raise ValueError(f"unknown VGG-19 layers {unknown}")
        self.layers = tuple(layers)
        tensors, meta = load_archive(path)
        deepest = max(VGG19_LAYERS.index(name) for name in self.layers)
        self.names = VGG19_LAYERS[: deepest + 1]
        # requested layers are checked first so the error names the one asked for
        for name in (*self.layers, *self.names):
            if f"{name}.weight" not in tensors:
                raise ArchiveError(f"layer {name} not found in archive {path}")
        self.convs = nn.ModuleDict()
        for name in self.names:
            wkey, bkey = f"{name}.weight", f"{name}.bias"
            weight = tensors[wkey].float()
            conv = nn.Conv2d(weight.shape[1], weight.shape[0], weight.shape[-1], padding=weight.shape[-1] // 2)
            conv.weight.data = weight
            conv.bias.data = tensors[bkey].float() if bkey in tensors else torch.zeros(weight.shape[0])
            self.convs[name] = conv
        self.in_channels = self.convs[self.names[0]].in_channels
        mean = meta.get("mean", [0.0] * self.in_channels)
        std = meta.get("std", [1.0] * self.in_channels)
        self.register_buffer("mean", torch.tensor(mean, dtype=torch.float32).view(-1, 1, 1))
        self.register_buffer("std", torch.tensor(std, dtype=torch.float32).view(-1, 1, 1))
        self.freeze()

    def forward(self, x):
        x = (x - self.mean) / self.std
        out = OrderedDict()
        block = 1
        for name in self.names:
            b = int(name[4])
            if b != block:
                x = F.max_pool2d(x, 2)
                block = b
            x = F.relu(self.convs[name](x))
            if name in self.layers:
                out[name] = x
        return OrderedDict((name, out[name]) for name in self.layers)


def build_extractor(spec: ExtractorSpec) -> Extractor:
    if spec.kind is ExtractorKind.FIXED_RANDOM:
        return FixedRandomExtractor(spec.seed, spec.layers, spec.in_channels, spec.widths)
    if spec.archive_path is None:
        raise ValueError("pretrained_archive extractor needs archive_path")
    return VGGArchiveExtractor(spec.archive_path, spec.layers)


def extract(extractor: Extractor, image: torch.Tensor) -> FeaturePyramid:
    """Feature pyramid for ``(C, H, W)`` or ``(B, C, H, W)`` images.

    Differentiable in ``image``; extractor weights never receive gradient.
    """
    if not bool(torch.isfinite(image).all()):
        raise ValueError("non-finite values in extractor input")
    squeeze = image.dim() == 3
    x = extractor.prepare(image.unsqueeze(0) if squeeze else image)
    p = next(extractor.parameters())
    if x.dtype != p.dtype:
        raise TypeError(f"image dtype {x.dtype} does not match extractor dtype {p.dtype}")
    maps = extractor(x)
    if squeeze:
        maps = OrderedDict((k, v.squeeze(0)) for k, v in maps.items())
    return FeaturePyramid(maps)
