"""Datasets: Bars-And-Stripes generation, IDX (MNIST) I/O, binarisation."""
from __future__ import annotations

import gzip
import itertools
import os
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Dataset",
    "IdxError",
    "WrongMagicError",
    "TruncatedFileError",
    "CountMismatchError",
    "generate_bas",
    "load_idx",
    "write_idx",
    "binarize",
    "load_mnist_subset",
]

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray | None = None
    dims: tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2:
            raise ValueError("samples must be a 2-d array (n_samples, n_features)")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples.shape[0],):
                raise ValueError("labels must align 1:1 with samples")
        h, w = self.dims
        if h * w != self.samples.shape[1]:
            raise ValueError(f"dims {self.dims} do not match sample length {self.samples.shape[1]}")

    def __len__(self):
        return self.samples.shape[0]

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.samples[index], labels, self.dims)


def generate_bas(n: int) -> Dataset:
    """All n x n Bars-And-Stripes images, uniform images counted once.

    Row patterns come first, ordered by the binary code of the rows (first
    row is the most significant bit), followed by the column patterns that
    are not already present, in the same code order.
    """
    if not 2 <= n <= 5:
        raise ValueError(f"BAS side length must be in [2, 5], got {n}")
    patterns = []
    seen = set()
    for bits in itertools.product((0, 1), repeat=n):
        img = np.repeat(np.array(bits)[:, None], n, axis=1)
        patterns.append(img.ravel())
        seen.add(img.tobytes())
    for bits in itertools.product((0, 1), repeat=n):
        img = np.repeat(np.array(bits)[None, :], n, axis=0)
        if img.tobytes() not in seen:
            patterns.append(img.ravel())
            seen.add(img.tobytes())
    return Dataset(np.array(patterns, dtype=float), None, (n, n))


class IdxError(ValueError):
    pass


class WrongMagicError(IdxError):
    pass


class TruncatedFileError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise WrongMagicError(f"{path}: magic {magic}, expected {expected_magic}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    shape = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(shape))
    if len(raw) - header < size:
        raise TruncatedFileError(f"{path}: expected {size} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(shape)


def load_idx(images_path, labels_path) -> Dataset:
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images.shape[0]} images but {labels.shape[0]} labels"
        )
    n, h, w = images.shape
    return Dataset(images.reshape(n, h * w) / 255.0, labels.astype(np.int64), (h, w))


def write_idx(d: Dataset, images_path, labels_path) -> None:
    """Write ``d`` in IDX format; pixels are mapped back to bytes via round(255 x)."""
    if d.labels is None:
        raise ValueError("IDX export needs labels")
    n = len(d)
    h, w = d.dims
    pixels = np.clip(np.rint(d.samples * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(d.labels.astype(np.uint8).tobytes())


def binarize(d: Dataset, threshold: float = 0.5) -> Dataset:
    return Dataset((d.samples >= threshold).astype(float), d.labels, d.dims)


def load_mnist_subset(n_train: int, n_test: int, seed: int = 0, mnist_dir=None):
    """Return ``(train, test)`` MNIST datasets.

    Reads the standard IDX files from ``mnist_dir`` (or ``$FLEXCL_MNIST_DIR``)
    when available and takes random subsets of the official splits.  Without
    the files, falls back to the 5000-image MNIST sample shipped with
    ``mlxtend`` and splits it after a seeded shuffle.
    """
    rng = np.random.default_rng(seed)
    mnist_dir = mnist_dir or os.environ.get("FLEXCL_MNIST_DIR")
    if mnist_dir:
        def pick(stem):
            for suffix in ("", ".gz"):
                p = os.path.join(mnist_dir, stem + suffix)
                if os.path.exists(p):
                    return p
            raise FileNotFoundError(os.path.join(mnist_dir, stem))

        train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))
        test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"))
        return (
            train.subset(rng.permutation(len(train))[:n_train]),
            test.subset(rng.permutation(len(test))[:n_test]),
        )

    from mlxtend.data import mnist_data

    x, y = mnist_data()
    if n_train + n_test > len(y):
        raise ValueError(f"bundled sample has only {len(y)} images")
    perm = rng.permutation(len(y))
    full = Dataset(x / 255.0, y, (28, 28))
    return full.subset(perm[:n_train]), full.subset(perm[n_train:n_train + n_test])
