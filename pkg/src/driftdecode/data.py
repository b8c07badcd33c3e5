"""Dataset sources (MNIST IDX files, PNG folders) and seeded batching."""

from __future__ import annotations

import enum
import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import rng as rngmod

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MNIST_PAD = 2


class DatasetKind(str, enum.Enum):
    MNIST_IDX = "mnist_idx"
    IMAGE_FOLDER = "image_folder"


class DatasetFormatError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: DatasetKind = DatasetKind.MNIST_IDX
    path: str = "."
    split: str = "train"
    crop: tuple | None = None
    hflip: bool = False
    flip_prob: float = 0.5
    seed: int = 0
    limit: int | None = None

    def __post_init__(self):
        self.kind = DatasetKind(self.kind)
        if self.split not in MNIST_FILES:
            raise ValueError(f"split must be 'train' or 'test', got {self.split!r}")
        if self.crop is not None:
            self.crop = tuple(int(v) for v in self.crop)


def _open(path: Path):
    if path.exists():
        return open(path, "rb")
    gz = path.with_name(path.name + ".gz")
    if gz.exists():
        return gzip.open(gz, "rb")
    raise FileNotFoundError(f"MNIST file not found: {path} (or {gz.name})")


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse an IDX file of unsigned bytes; dimensions are big-endian u32."""
    path = Path(path)
    with _open(path) as fh:
        data = fh.read()
    if len(data) < 4:
        raise DatasetFormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", data[:4])
    if magic != expected_magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetFormatError(f"{path}: truncated dimensions at offset 4")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header != count:
        raise DatasetFormatError(
            f"{path}: payload at offset {header} has {len(data) - header} bytes, header declares {dims}"
        )
    return np.frombuffer(data, dtype=np.uint8, offset=header).reshape(dims)


class MnistSource:
    """MNIST digits as ``1 x 32 x 32`` floats in [0, 1] (28x28 zero-padded by 2 px)."""

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = images
        self.labels = labels
        self.shape = (1, images.shape[1] + 2 * MNIST_PAD, images.shape[2] + 2 * MNIST_PAD)

    def __len__(self):
        return len(self.images)

    def get(self, index: int, epoch: int = 0) -> torch.Tensor:
        img = torch.from_numpy(self.images[index].astype(np.float32) / 255.0)
        img = torch.nn.functional.pad(img, (MNIST_PAD,) * 4)
        return img.unsqueeze(0)

    def __getitem__(self, index):
        return self.get(index)


def load_mnist(spec: DatasetSpec) -> MnistSource:
    root = Path(spec.path)
    img_name, lbl_name = MNIST_FILES[spec.split]
    images = read_idx(root / img_name, IDX_IMAGES_MAGIC)
    labels = read_idx(root / lbl_name, IDX_LABELS_MAGIC)
    if images.ndim != 3:
        raise DatasetFormatError(f"{root / img_name}: expected 3 dimensions, got {images.shape}")
    if len(labels) != len(images):
        raise DatasetFormatError(f"{root}: {len(images)} images but {len(labels)} labels")
    if spec.limit is not None:
        images, labels = images[: spec.limit], labels[: spec.limit]
    return MnistSource(images, labels)


def hflip(x: torch.Tensor) -> torch.Tensor:
    return torch.flip(x, dims=(-1,))


class ImageFolderSource:
    """PNG images in lexicographic order with seeded crop / flip per access."""

    def __init__(self, spec: DatasetSpec):
        self.spec = spec
        root = Path(spec.path)
        if not root.is_dir():
            raise FileNotFoundError(f"image folder not found: {root}")
        self.files = []
        self.skipped = []
        for p in sorted(root.iterdir()):
            if p.suffix.lower() != ".png":
                continue
            try:
                with Image.open(p) as im:
                    im.verify()
                self.files.append(p)
            except Exception as exc:  # noqa: BLE001 - any decode failure is a skip
                log.warning("skipping undecodable image %s: %s", p, exc)
                self.skipped.append(str(p))
        if spec.limit is not None:
            self.files = self.files[: spec.limit]
        if not self.files:
            raise FileNotFoundError(f"no decodable PNG images in {root}")
        first = self._load(0)
        C, H, W = first.shape
        if spec.crop is not None:
            ch, cw = spec.crop
            if ch > H or cw > W:
                raise ValueError(f"crop {spec.crop} larger than image {H}x{W} ({self.files[0]})")
            H, W = ch, cw
        self.shape = (C, H, W)

    def __len__(self):
        return len(self.files)

    @property
    def manifest(self) -> dict:
        return {"files": [str(p) for p in self.files], "skipped": self.skipped}

    def _load(self, index: int) -> torch.Tensor:
        with Image.open(self.files[index]) as im:
            im = im.convert("L") if im.mode in ("L", "I", "I;16", "1") else im.convert("RGB")
            arr = np.asarray(im, dtype=np.float32) / 255.0
        if arr.ndim == 2:
            arr = arr[None]
        else:
            arr = arr.transpose(2, 0, 1)
        return torch.from_numpy(np.ascontiguousarray(arr))

    def get(self, index: int, epoch: int = 0) -> torch.Tensor:
        x = self._load(index)
        gen = rngmod.numpy_stream(self.spec.seed, rngmod.PURPOSE_AUGMENT, index, epoch)
        if self.spec.crop is not None:
            ch, cw = self.spec.crop
            H, W = x.shape[-2:]
            if ch > H or cw > W:
                raise ValueError(f"crop {self.spec.crop} larger than {self.files[index]} ({H}x{W})")
            top = int(gen.integers(0, H - ch + 1))
            left = int(gen.integers(0, W - cw + 1))
            x = x[..., top : top + ch, left : left + cw]
        if self.spec.hflip and gen.random() < self.spec.flip_prob:
            x = hflip(x)
        return x.contiguous()

    def __getitem__(self, index):
        return self.get(index)


def load_image_folder(spec: DatasetSpec) -> ImageFolderSource:
    return ImageFolderSource(spec)


def open_source(spec: DatasetSpec):
    if spec.kind is DatasetKind.MNIST_IDX:
        return load_mnist(spec)
    return load_image_folder(spec)


def batch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return rngmod.numpy_stream(seed, rngmod.PURPOSE_SHUFFLE, epoch).permutation(n)


def batches(source, batch_size: int, seed: int, epoch: int, start: int = 0):
    """Yield ``(indices, images)`` in the epoch-seeded order.

    The last partial batch is kept. ``start`` skips that many leading
    batches (used when resuming mid-epoch).
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = batch_order(len(source), seed, epoch)
    for b, lo in enumerate(range(0, len(order), batch_size)):
        if b < start:
            continue
        idx = order[lo : lo + batch_size]
        yield idx, torch.stack([source.get(int(i), epoch) for i in idx])
