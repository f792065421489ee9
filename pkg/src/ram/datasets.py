"""MNIST ingestion and the translated / cluttered task generators.

Generated examples are never stored: each one is a pure function of its base
digit and a per-example seed derived from ``(seed, epoch, index)``.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .diffcore import ConfigError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
DIGIT = 28
TEST_SEED = 20140624
FIXED_EPOCH = 2**31 - 1  # epoch slot reserved for fixed evaluation sets
VALIDATION_SIZE = 10000

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class FormatError(ValueError):
    pass


class DataMissingError(FileNotFoundError):
    pass


@dataclass
class LabeledImage:
    image: np.ndarray
    label: int


@dataclass
class ImageSet:
    images: np.ndarray  # (N, H, W) float in [0, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]))

    def subset(self, sl):
        return ImageSet(self.images[sl], self.labels[sl])


# ------------------------------------------------------------------- IDX --

def _read(path):
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx_images(data: bytes):
    if len(data) < 16:
        raise FormatError("image file truncated at offset 0 (header needs 16 bytes)")
    magic, n, rows, cols = struct.unpack_from(">IIII", data, 0)
    if magic != IMAGE_MAGIC:
        raise FormatError(f"bad image magic 0x{magic:08x} at offset 0")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise FormatError(f"image payload truncated at offset {len(data)}, expected {need} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows, cols)


def parse_idx_labels(data: bytes):
    if len(data) < 8:
        raise FormatError("label file truncated at offset 0 (header needs 8 bytes)")
    magic, n = struct.unpack_from(">II", data, 0)
    if magic != LABEL_MAGIC:
        raise FormatError(f"bad label magic 0x{magic:08x} at offset 0")
    if len(data) < 8 + n:
        raise FormatError(f"label payload truncated at offset {len(data)}, expected {8 + n} bytes")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8)


def load_mnist_idx(images_path, labels_path) -> ImageSet:
    images = parse_idx_images(_read(images_path))
    labels = parse_idx_labels(_read(labels_path))
    if len(images) != len(labels):
        raise FormatError(f"count mismatch at offset 4: {len(images)} images vs {len(labels)} labels")
    if labels.size and labels.max() > 9:
        raise FormatError(f"label {labels.max()} out of range")
    return ImageSet(images.astype(np.float64) / 255.0, labels.astype(np.int64))


def resolve_data_dir(data_dir=None):
    """An explicit ``data_dir`` is used as is; otherwise ``RAM_DATA_DIR``, then
    ``~/data/mnist``."""
    candidates = [data_dir] if data_dir else [os.environ.get("RAM_DATA_DIR"), "~/data/mnist"]
    for c in candidates:
        if not c:
            continue
        p = Path(c).expanduser()
        if all((p / f).exists() or (p / (f + ".gz")).exists() for f in MNIST_FILES["train"]):
            return p
    raise DataMissingError(
        f"MNIST IDX files not found (tried {[c for c in candidates if c]}); set RAM_DATA_DIR")


def load_mnist(data_dir=None, split="train") -> ImageSet:
    root = resolve_data_dir(data_dir)
    paths = []
    for f in MNIST_FILES[split]:
        p = root / f
        paths.append(p if p.exists() else root / (f + ".gz"))
    if not all(p.exists() for p in paths):
        raise DataMissingError(f"missing {split} files under {root}")
    return load_mnist_idx(*paths)


def train_validation_split(train: ImageSet):
    n = len(train) - VALIDATION_SIZE
    return train.subset(slice(0, n)), train.subset(slice(n, None))


# ------------------------------------------------------------- generators --

def example_rng(seed, epoch, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), int(index)]))


def make_translated(digit: LabeledImage, canvas, rng) -> LabeledImage:
    h, w = digit.image.shape
    if canvas < max(h, w):
        raise ConfigError(f"canvas {canvas} smaller than digit {digit.image.shape}")
    out = np.zeros((canvas, canvas), dtype=digit.image.dtype)
    r, c = rng.integers(0, canvas - h + 1), rng.integers(0, canvas - w + 1)
    out[r:r + h, c:c + w] = digit.image
    return LabeledImage(out, digit.label)


def make_cluttered(digit: LabeledImage, canvas, clutter_count, clutter_source: ImageSet, rng,
                   clutter_patch=8, exclude=None) -> LabeledImage:
    """Translated digit plus ``clutter_count`` random sub-patches of other
    digits, composited by elementwise max. ``exclude`` is the index of the
    target digit in ``clutter_source``."""
    base = make_translated(digit, canvas, rng)
    out = base.image
    n = len(clutter_source)
    for _ in range(clutter_count):
        j = int(rng.integers(0, n))
        while j == exclude and n > 1:
            j = int(rng.integers(0, n))
        src = clutter_source.images[j]
        sr, sc = rng.integers(0, src.shape[0] - clutter_patch + 1, size=2)
        piece = src[sr:sr + clutter_patch, sc:sc + clutter_patch]
        r, c = rng.integers(0, canvas - clutter_patch + 1, size=2)
        np.maximum(out[r:r + clutter_patch, c:c + clutter_patch], piece,
                   out=out[r:r + clutter_patch, c:c + clutter_patch])
    return LabeledImage(out, digit.label)


TASK_KINDS = ("centered", "translated", "cluttered")


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "centered"
    canvas: int = 28
    clutter_count: int = 0
    clutter_patch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "cluttered" and self.clutter_count < 1:
            raise ConfigError("cluttered task needs clutter_count >= 1")
        if self.kind in ("translated", "cluttered") and self.canvas <= DIGIT:
            raise ConfigError(f"{self.kind} task needs canvas > {DIGIT}")
        if self.kind == "centered" and self.canvas != DIGIT:
            raise ConfigError("centered task uses the 28x28 digit as is")

    @property
    def name(self):
        if self.kind == "centered":
            return "mnist28"
        return f"{self.kind}{self.canvas}"


TASKS = {
    "mnist28": TaskSpec("centered", 28),
    "translated60": TaskSpec("translated", 60),
    "cluttered60": TaskSpec("cluttered", 60, clutter_count=4),
    "cluttered100": TaskSpec("cluttered", 100, clutter_count=8),
}


def generate_example(spec: TaskSpec, base: ImageSet, index, rng) -> LabeledImage:
    digit = base[index]
    if spec.kind == "centered":
        return LabeledImage(digit.image.copy(), digit.label)
    if spec.kind == "translated":
        return make_translated(digit, spec.canvas, rng)
    return make_cluttered(digit, spec.canvas, spec.clutter_count, base, rng,
                          clutter_patch=spec.clutter_patch, exclude=index)


def generate_batch(spec: TaskSpec, base: ImageSet, indices, seed, epoch, slots=None):
    """Images and labels for base ``indices``; ``slots`` (defaults to the
    indices) key the per-example seeds."""
    slots = indices if slots is None else slots
    if spec.kind == "centered":
        return base.images[indices], base.labels[indices]
    imgs = np.empty((len(indices), spec.canvas, spec.canvas), dtype=base.images.dtype)
    for k, (i, s) in enumerate(zip(indices, slots)):
        imgs[k] = generate_example(spec, base, int(i), example_rng(seed, epoch, s)).image
    return imgs, base.labels[indices]


def generate_fixed_set(spec: TaskSpec, base: ImageSet, seed=TEST_SEED) -> ImageSet:
    """Deterministic generated copy of ``base`` (one instance per digit)."""
    idx = np.arange(len(base))
    images, labels = generate_batch(spec, base, idx, seed, epoch=FIXED_EPOCH)
    return ImageSet(images, labels)


class TaskStream:
    """Training stream of generated examples, reshuffled every epoch.

    An epoch has ``epoch_size`` examples; slot ``k`` uses base digit
    ``k % len(base)`` with a fresh placement.
    """

    def __init__(self, spec: TaskSpec, base: ImageSet, epoch_size=None, seed=None):
        self.spec = spec
        self.base = base
        self.epoch_size = epoch_size or len(base)
        self.seed = spec.seed if seed is None else seed

    def batches(self, epoch, batch_size):
        order = np.random.default_rng(np.random.SeedSequence([self.seed, epoch, 2**31])).permutation(self.epoch_size)
        for start in range(0, self.epoch_size, batch_size):
            slots = order[start:start + batch_size]
            idx = slots % len(self.base)
            images, labels = generate_batch(self.spec, self.base, idx, self.seed, epoch, slots)
            yield images, labels, slots
