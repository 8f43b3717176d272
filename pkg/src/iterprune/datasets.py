"""MNIST (IDX) and CIFAR-10 (binary batch) readers, augmentation and batching.

Images are stored normalized as float32 ``(N, c, h, w)``; the raw uint8
payload is kept alongside so files can be re-serialized byte for byte.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import FormatError, UsageError

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte", 60000),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", 10000),
}
CIFAR_RECORD = 3073
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}
CIFAR_COUNTS = {"train": 50000, "test": 10000}

DATA_DIR_ENV = "ITERPRUNE_DATA_DIR"


@dataclass
class Dataset:
    name: str
    split: str
    images: np.ndarray
    labels: np.ndarray
    mean: tuple
    std: tuple
    raw: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise FormatError(f"{self.name}/{self.split}: {len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])


def resolve_data_dir(path=None) -> Path:
    """``path`` if given, else ``$ITERPRUNE_DATA_DIR``, else ``./data``."""
    return Path(path or os.environ.get(DATA_DIR_ENV) or "data")


def normalize(raw: np.ndarray, mean, std) -> np.ndarray:
    """uint8 (N, c, h, w) -> float32 ((x/255) - mean) / std per channel."""
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return ((raw.astype(np.float32) / np.float32(255.0)) - m) / s


# -- MNIST ----------------------------------------------------------------------


def _read(path: Path) -> bytes:
    if not path.is_file():
        raise FormatError(f"{path}: file not found")
    return path.read_bytes()


def parse_idx_images(buf: bytes, where: str = "<buffer>") -> np.ndarray:
    if len(buf) < 16:
        raise FormatError(f"{where}: truncated header ({len(buf)} bytes)")
    magic, n, rows, cols = struct.unpack(">IIII", buf[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{where}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
    expected = 16 + n * rows * cols
    if len(buf) != expected:
        raise FormatError(f"{where}: expected {expected} bytes, found {len(buf)}")
    return np.frombuffer(buf, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)


def parse_idx_labels(buf: bytes, where: str = "<buffer>") -> np.ndarray:
    if len(buf) < 8:
        raise FormatError(f"{where}: truncated header ({len(buf)} bytes)")
    magic, n = struct.unpack(">II", buf[:8])
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{where}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
    if len(buf) != 8 + n:
        raise FormatError(f"{where}: expected {8 + n} bytes, found {len(buf)}")
    labels = np.frombuffer(buf, dtype=np.uint8, offset=8)
    if labels.size and labels.max() > 9:
        raise FormatError(f"{where}: label {labels.max()} out of range")
    return labels


def write_idx_images(raw: np.ndarray) -> bytes:
    n, _, rows, cols = raw.shape
    return struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + raw.astype(np.uint8).tobytes()


def write_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", IDX_LABEL_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()


def load_mnist(path, split: str = "train", check_count: bool = True) -> Dataset:
    """Load one MNIST split from a directory holding the four IDX files."""
    if split not in MNIST_FILES:
        raise UsageError(f"unknown split {split!r}")
    root = Path(path)
    img_name, lbl_name, count = MNIST_FILES[split]
    raw = parse_idx_images(_read(root / img_name), str(root / img_name))
    labels = parse_idx_labels(_read(root / lbl_name), str(root / lbl_name))
    if len(raw) != len(labels):
        raise FormatError(f"{root / img_name}: {len(raw)} images but {root / lbl_name} has {len(labels)} labels")
    if check_count and len(raw) != count:
        raise FormatError(f"{root / img_name}: expected {count} images, found {len(raw)}")
    return Dataset("mnist", split, normalize(raw, MNIST_MEAN, MNIST_STD),
                   labels.astype(np.int64), MNIST_MEAN, MNIST_STD, raw)


# -- CIFAR-10 -------------------------------------------------------------------


def parse_cifar_batch(buf: bytes, where: str = "<buffer>") -> tuple[np.ndarray, np.ndarray]:
    if len(buf) == 0 or len(buf) % CIFAR_RECORD:
        raise FormatError(f"{where}: size {len(buf)} is not a multiple of the {CIFAR_RECORD}-byte record")
    recs = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = recs[:, 0]
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{where}: record {bad} has label {labels[bad]} > 9")
    return recs[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_batch(raw: np.ndarray, labels: np.ndarray) -> bytes:
    recs = np.concatenate([labels.astype(np.uint8)[:, None], raw.reshape(len(raw), -1)], axis=1)
    return recs.astype(np.uint8).tobytes()


def load_cifar10(path, split: str = "train", check_count: bool = True) -> Dataset:
    """Load a CIFAR-10 split from the ``cifar-10-batches-bin`` layout (or its parent)."""
    if split not in CIFAR_FILES:
        raise UsageError(f"unknown split {split!r}")
    root = Path(path)
    if not (root / CIFAR_FILES[split][0]).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    raws, labels = [], []
    for name in CIFAR_FILES[split]:
        r, lab = parse_cifar_batch(_read(root / name), str(root / name))
        raws.append(r)
        labels.append(lab)
    raw = np.concatenate(raws)
    lab = np.concatenate(labels)
    if check_count and len(raw) != CIFAR_COUNTS[split]:
        raise FormatError(f"{root}: expected {CIFAR_COUNTS[split]} {split} records, found {len(raw)}")
    return Dataset("cifar10", split, normalize(raw, CIFAR_MEAN, CIFAR_STD),
                   lab.astype(np.int64), CIFAR_MEAN, CIFAR_STD, raw)


def load_dataset(name: str, path, split: str) -> Dataset:
    if name == "mnist":
        return load_mnist(Path(path) / "mnist" if (Path(path) / "mnist").is_dir() else path, split)
    if name == "cifar10":
        return load_cifar10(Path(path) / "cifar10" if (Path(path) / "cifar10").is_dir() else path, split)
    raise UsageError(f"unknown dataset {name!r}")


def verify_dir(name: str, path) -> list[str]:
    """Problems found in the files for ``name`` under ``path``; empty when intact."""
    root = Path(path)
    if name == "mnist":
        sub = root / "mnist" if (root / "mnist").is_dir() else root
        problems = []
        for split, (img, lbl, count) in MNIST_FILES.items():
            for fname, parser, header in ((img, parse_idx_images, 16), (lbl, parse_idx_labels, 8)):
                p = sub / fname
                if not p.is_file():
                    problems.append(f"{p}: missing")
                    continue
                try:
                    arr = parser(p.read_bytes(), str(p))
                except FormatError as exc:
                    problems.append(str(exc))
                    continue
                if len(arr) != count:
                    problems.append(f"{p}: expected {count} records, found {len(arr)}")
        return problems
    if name == "cifar10":
        sub = root / "cifar10" if (root / "cifar10").is_dir() else root
        if (sub / "cifar-10-batches-bin").is_dir():
            sub = sub / "cifar-10-batches-bin"
        problems = []
        for split, names in CIFAR_FILES.items():
            for fname in names:
                p = sub / fname
                if not p.is_file():
                    problems.append(f"{p}: missing")
                    continue
                size = p.stat().st_size
                per_file = 10000 * CIFAR_RECORD
                if size != per_file:
                    problems.append(f"{p}: expected {per_file} bytes, found {size}")
                    continue
                try:
                    parse_cifar_batch(p.read_bytes(), str(p))
                except FormatError as exc:
                    problems.append(str(exc))
        return problems
    raise UsageError(f"unknown dataset {name!r}")


# -- augmentation and batching ------------------------------------------------


def augment(x: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random horizontal flip (p=0.5) and random crop from zero padding, per example.

    Only applied to 3-channel 32x32 (CIFAR-shaped) batches; anything else is
    returned unchanged.
    """
    if x.ndim != 4 or x.shape[1:] != (3, 32, 32):
        return x
    n, _, h, w = x.shape
    flips = rng.random(n) < 0.5
    shifts = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return apply_augmentation(x, flips, shifts, pad)


def apply_augmentation(x: np.ndarray, flips: np.ndarray, shifts: np.ndarray, pad: int = 4) -> np.ndarray:
    """Deterministic half of :func:`augment`; ``shifts`` are crop offsets into the padded image."""
    n, _, h, w = x.shape
    out = np.where(flips[:, None, None, None], x[..., ::-1], x)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    res = np.empty_like(x)
    for i in range(n):
        dy, dx = shifts[i]
        res[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return res


@dataclass(frozen=True)
class BatchPlan:
    """Epoch-wise shuffling; the order for an epoch depends only on (seed, epoch)."""

    seed: int
    batch_size: int
    n: int

    def permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.seed, epoch]).permutation(self.n)

    def batches(self, epoch: int) -> Iterator[np.ndarray]:
        perm = self.permutation(epoch)
        for start in range(0, self.n, self.batch_size):
            yield perm[start:start + self.batch_size]

    def __len__(self) -> int:
        return -(-self.n // self.batch_size)


def stats_batch(ds: Dataset, size: int, seed: int, augmented: bool = False) -> np.ndarray:
    """A fixed, seeded batch of training images for activation statistics."""
    if not 0 < size <= len(ds):
        raise UsageError(f"stats batch size {size} not in (0, {len(ds)}]")
    rng = np.random.default_rng([seed, 0x57A7])
    idx = np.sort(rng.choice(len(ds), size=size, replace=False))
    batch = ds.images[idx]
    if augmented:
        batch = augment(batch, np.random.default_rng([seed, 0xA06]))
    return np.ascontiguousarray(batch)
