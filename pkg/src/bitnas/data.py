"""Dataset ingestion: the CIFAR-10 binary batch format, the MNIST IDX
format, the seeded half/half search split, and a synthetic generator that
writes CIFAR-format files (the offline test fixture and demo data source).

Images are stored raw (uint8) and normalized per batch with the documented
per-channel constants; raw storage keeps a 50k-image dataset around 150 MB.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError
from .seeding import rng_for

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], np.float32)
MNIST_MEAN = np.array([0.1307], np.float32)
MNIST_STD = np.array([0.3081], np.float32)

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_LABELS = (
    "airplane automobile bird cat deer dog frog horse ship truck".split()
)


@dataclass
class Dataset:
    """A labelled image set with lazy normalization.

    ``raw`` is uint8 NCHW; ``batch`` converts the selected rows to float32
    and applies (x/255 - mean) / std.
    """

    raw: np.ndarray
    labels: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    num_classes: int = 10
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.labels.min(initial=0) < 0 or \
           self.labels.max(initial=0) >= self.num_classes:
            raise FormatError(
                f"labels outside [0, {self.num_classes}): "
                f"range {self.labels.min()}..{self.labels.max()}"
            )

    @property
    def num_examples(self) -> int:
        return self.raw.shape[0]

    @property
    def channels(self) -> int:
        return self.raw.shape[1]

    def normalize(self, raw: np.ndarray) -> np.ndarray:
        x = raw.astype(np.float32) / 255.0
        x -= self.mean[None, :, None, None]
        x /= self.std[None, :, None, None]
        return x

    def batch(self, indices, augment_rng: np.random.Generator | None = None):
        raw = self.raw[np.asarray(indices)]
        if augment_rng is not None:
            raw = _augment(raw, augment_rng)
        return self.normalize(raw), self.labels[np.asarray(indices)]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(self.raw[idx], self.labels[idx], self.mean, self.std,
                       self.num_classes, self.provenance)

    def take(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, self.num_examples)))

    def search_split(self, seed: int) -> tuple["Dataset", "Dataset"]:
        """Half for weight training, half held out for architecture steps;
        a pure function of the seed."""
        order = rng_for(seed, "search_split").permutation(self.num_examples)
        half = self.num_examples // 2
        return self.subset(order[:half]), self.subset(order[half:])


def _augment(raw: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random 4-pixel-pad crop plus horizontal flip (the minimal standard
    CIFAR pipeline; no cutout)."""
    n, c, h, w = raw.shape
    padded = np.zeros((n, c, h + 8, w + 8), raw.dtype)
    padded[:, :, 4 : 4 + h, 4 : 4 + w] = raw
    out = np.empty_like(raw)
    offs = rng.integers(0, 9, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        dy, dx = offs[i]
        img = padded[i, :, dy : dy + h, dx : dx + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_cifar10(directory) -> dict[str, Dataset]:
    """Parse the binary-version batch files: each record is one label byte
    followed by 3072 pixel bytes (RGB planes, row-major 32x32).  Returns
    {"train": ..., "test": ...}."""
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    test_file = directory / "test_batch.bin"
    if not train_files:
        raise FormatError(f"{directory}: no data_batch_*.bin files found")
    if not test_file.exists():
        raise FormatError(f"{test_file}: missing test batch")

    def parse(path: Path):
        blob = path.read_bytes()
        if len(blob) == 0 or len(blob) % CIFAR_RECORD != 0:
            raise FormatError(
                f"{path}: length {len(blob)} is not a multiple of "
                f"{CIFAR_RECORD}; record boundary broken at byte "
                f"{len(blob) - len(blob) % CIFAR_RECORD}"
            )
        records = np.frombuffer(blob, np.uint8).reshape(-1, CIFAR_RECORD)
        labels = records[:, 0].astype(np.int64)
        images = records[:, 1:].reshape(-1, 3, 32, 32)
        return images, labels

    sets = {}
    prov = {}
    train_parts = [parse(p) for p in train_files]
    prov.update({p.name: _digest(p) for p in train_files})
    prov[test_file.name] = _digest(test_file)
    sets["train"] = Dataset(
        np.concatenate([im for im, _ in train_parts]),
        np.concatenate([lb for _, lb in train_parts]),
        CIFAR10_MEAN, CIFAR10_STD, provenance=dict(prov),
    )
    test_images, test_labels = parse(test_file)
    sets["test"] = Dataset(test_images, test_labels, CIFAR10_MEAN, CIFAR10_STD,
                           provenance=dict(prov))
    return sets


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def _read_idx(path: Path, expect_magic: int) -> np.ndarray:
    blob = path.read_bytes()
    if len(blob) < 4:
        raise FormatError(f"{path}: too short for an IDX header")
    (magic,) = struct.unpack(">I", blob[:4])
    if magic != expect_magic:
        raise FormatError(
            f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expect_magic:08x}"
        )
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", blob[4 : 4 + 4 * ndim])
    payload = np.frombuffer(blob, np.uint8, offset=4 + 4 * ndim)
    if payload.size != int(np.prod(dims)):
        raise FormatError(
            f"{path}: payload has {payload.size} bytes, dims {dims} "
            f"require {int(np.prod(dims))}"
        )
    return payload.reshape(dims)


def load_mnist(directory, pad_to: int = 32) -> dict[str, Dataset]:
    """Parse the big-endian IDX files and zero-pad 28x28 digits to the
    configured input size (32 by default, matching the CIFAR geometry)."""
    directory = Path(directory)
    names = {
        "train_images": "train-images-idx3-ubyte",
        "train_labels": "train-labels-idx1-ubyte",
        "test_images": "t10k-images-idx3-ubyte",
        "test_labels": "t10k-labels-idx1-ubyte",
    }
    paths = {k: directory / v for k, v in names.items()}
    for p in paths.values():
        if not p.exists():
            raise FormatError(f"{p}: missing IDX file")
    prov = {p.name: _digest(p) for p in paths.values()}

    def build(images_key, labels_key):
        images = _read_idx(paths[images_key], IDX_IMAGES_MAGIC)
        labels = _read_idx(paths[labels_key], IDX_LABELS_MAGIC).astype(np.int64)
        if images.shape[0] != labels.shape[0]:
            raise FormatError(
                f"{paths[images_key]}: {images.shape[0]} images but "
                f"{labels.shape[0]} labels"
            )
        h, w = images.shape[1], images.shape[2]
        pad_h, pad_w = pad_to - h, pad_to - w
        out = np.zeros((images.shape[0], 1, pad_to, pad_to), np.uint8)
        out[:, 0, pad_h // 2 : pad_h // 2 + h, pad_w // 2 : pad_w // 2 + w] = images
        return Dataset(out, labels, MNIST_MEAN, MNIST_STD, provenance=dict(prov))

    return {
        "train": build("train_images", "train_labels"),
        "test": build("test_images", "test_labels"),
    }


# ---------------------------------------------------------------------------
# synthetic CIFAR-format fixture


def _smooth_field(rng: np.random.Generator, size: int = 32, cells: int = 8):
    """Low-frequency random field in [-1, 1]: coarse noise, bilinearly
    upsampled."""
    coarse = rng.standard_normal((3, cells + 1, cells + 1))
    scale = size // cells
    field = np.zeros((3, size, size), np.float32)
    for y in range(size):
        fy, ty = divmod(y, scale)
        for x in range(size):
            fx, tx = divmod(x, scale)
            wy, wx = ty / scale, tx / scale
            field[:, y, x] = (
                coarse[:, fy, fx] * (1 - wy) * (1 - wx)
                + coarse[:, fy + 1, fx] * wy * (1 - wx)
                + coarse[:, fy, fx + 1] * (1 - wy) * wx
                + coarse[:, fy + 1, fx + 1] * wy * wx
            )
    return field / max(1e-6, np.abs(field).max())


def make_synthetic_cifar10(
    num_train: int,
    num_test: int,
    seed: int = 0,
    amplitude: float = 64.0,
    noise: float = 40.0,
    jitter: int = 4,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """A learnable 10-class image task in CIFAR geometry: each class is a
    smooth template, randomly shifted, contrast-jittered and noised.  The
    knobs control how far class accuracy can get."""
    rng = rng_for(seed, "synthetic_cifar")
    templates = [_smooth_field(rng) for _ in range(10)]

    def draw(n):
        labels = rng.integers(0, 10, n).astype(np.int64)
        images = np.empty((n, 3, 32, 32), np.uint8)
        for i, lab in enumerate(labels):
            t = templates[lab]
            dy, dx = rng.integers(-jitter, jitter + 1, 2)
            shifted = np.roll(np.roll(t, dy, axis=1), dx, axis=2)
            contrast = rng.uniform(0.7, 1.3)
            pix = 128.0 + amplitude * contrast * shifted \
                + rng.normal(0.0, noise, (3, 32, 32))
            images[i] = np.clip(pix, 0, 255).astype(np.uint8)
        return images, labels

    train = draw(num_train)
    test = draw(num_test)
    return train[0], train[1], test[0], test[1]


def write_synthetic_cifar10(directory, num_train: int, num_test: int,
                            seed: int = 0, **knobs) -> None:
    """Write the synthetic task as real CIFAR-10 binary batch files so the
    production parser is exercised end to end."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tr_im, tr_lb, te_im, te_lb = make_synthetic_cifar10(
        num_train, num_test, seed, **knobs
    )

    def write(path: Path, images, labels):
        records = np.empty((images.shape[0], CIFAR_RECORD), np.uint8)
        records[:, 0] = labels
        records[:, 1:] = images.reshape(images.shape[0], -1)
        path.write_bytes(records.tobytes())

    per_file = 10000
    chunks = max(1, -(-num_train // per_file))
    for i in range(chunks):
        lo, hi = i * per_file, min(num_train, (i + 1) * per_file)
        write(directory / f"data_batch_{i + 1}.bin", tr_im[lo:hi], tr_lb[lo:hi])
    write(directory / "test_batch.bin", te_im, te_lb)
