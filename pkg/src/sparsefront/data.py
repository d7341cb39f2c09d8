"""MNIST ingestion: IDX parsing, [0,1] normalization, digit-pair filtering.

Files may be the raw IDX binaries or their canonical .gz archives; both are
parsed transparently. A fetch helper downloads and checksums the four
canonical archives for offline-reproducible setups; pointing the loader at an
existing directory (flag or SPARSEFRONT_DATA_DIR) skips any network use.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
import urllib.request
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "load_idx",
    "load_mnist",
    "filter_pair",
    "fetch_mnist",
    "data_dir",
    "IdxFormatError",
]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR_ENV = "SPARSEFRONT_DATA_DIR"
DEFAULT_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist"

# filename -> (gzip size in bytes, md5 of the gzip archive)
MNIST_ARCHIVES = {
    "train-images-idx3-ubyte.gz": (9912422, "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    "train-labels-idx1-ubyte.gz": (28881, "d53e105ee54ea40749a09fcbcd1e9432"),
    "t10k-images-idx3-ubyte.gz": (1648877, "9fb629c4189551a2d022fa330f9573f3"),
    "t10k-labels-idx1-ubyte.gz": (4542, "ec29112dd5afa0611ce80d1b7f02629c"),
}


class IdxFormatError(ValueError):
    """Raised when an IDX file is malformed (bad magic, truncation, mismatch)."""


@dataclass
class Dataset:
    """Flattened images in [0,1] plus integer labels and a split tag."""

    images: np.ndarray  # (n, 784) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    split: str = ""

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels disagree on sample count")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")

    def __len__(self):
        return self.images.shape[0]


def _open_maybe_gzip(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be32(f, path, what):
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_idx(images_path, labels_path) -> Dataset:
    """Parse an IDX image/label file pair; pixels are scaled by 1/255."""
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be32(f, images_path, "magic number")
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{IMAGE_MAGIC:08x}"
            )
        count = _read_be32(f, images_path, "image count")
        rows = _read_be32(f, images_path, "row count")
        cols = _read_be32(f, images_path, "column count")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: truncated pixel data "
                f"({len(raw)} of {count * rows * cols} bytes)"
            )
        images = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)
    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be32(f, labels_path, "magic number")
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x} at offset 0, "
                f"expected 0x{LABEL_MAGIC:08x}"
            )
        n_labels = _read_be32(f, labels_path, "label count")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise IdxFormatError(
                f"{labels_path}: truncated label data ({len(raw)} of {n_labels} bytes)"
            )
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    if count != n_labels:
        raise IdxFormatError(
            f"image count {count} != label count {n_labels} "
            f"for {images_path} / {labels_path}"
        )
    return Dataset(images.astype(np.float64) / 255.0, labels)


def data_dir(override=None) -> Path:
    """Resolve the dataset directory: explicit argument, env var, or ~/.sparsefront."""
    if override:
        return Path(override)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path.home() / ".sparsefront" / "mnist"


def _find_idx(directory, stem):
    for name in (stem, stem + ".gz"):
        path = Path(directory) / name
        if path.exists():
            return path
    raise FileNotFoundError(
        f"{stem}[.gz] not found in {directory}; run `sparsefront fetch-data` "
        f"or point --data / {DATA_DIR_ENV} at an existing MNIST directory"
    )


def load_mnist(directory=None, split="train") -> Dataset:
    """Load one MNIST split ('train' or 'test') from a directory of IDX files."""
    directory = data_dir(directory)
    prefix = {"train": "train", "test": "t10k"}[split]
    ds = load_idx(
        _find_idx(directory, f"{prefix}-images-idx3-ubyte"),
        _find_idx(directory, f"{prefix}-labels-idx1-ubyte"),
    )
    ds.split = split
    return ds


def filter_pair(dataset: Dataset, a: int, b: int) -> Dataset:
    """Binary subset: digit a -> label +1, digit b -> label -1, original order kept."""
    if a == b:
        raise ValueError("digit pair must be distinct")
    if not (0 <= a <= 9 and 0 <= b <= 9):
        raise ValueError("digits must be in 0..9")
    mask = (dataset.labels == a) | (dataset.labels == b)
    if not mask.any():
        raise ValueError(f"no samples labeled {a} or {b}")
    labels = np.where(dataset.labels[mask] == a, 1, -1).astype(np.int64)
    return Dataset(dataset.images[mask].copy(), labels, dataset.split)


def fetch_mnist(directory=None, base_url=DEFAULT_BASE_URL, verbose=True) -> Path:
    """Download the four canonical archives into ``directory`` and verify checksums.

    Files already present with a matching checksum are kept as-is.
    """
    directory = data_dir(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, (size, md5) in MNIST_ARCHIVES.items():
        dest = directory / name
        if dest.exists() and _checksum_ok(dest, size, md5):
            if verbose:
                print(f"{name}: already present, checksum OK")
            continue
        url = f"{base_url.rstrip('/')}/{name}"
        if verbose:
            print(f"fetching {url}")
        with urllib.request.urlopen(url) as response, open(dest, "wb") as out:
            out.write(response.read())
        if not _checksum_ok(dest, size, md5):
            raise IOError(f"{dest}: downloaded file fails size/md5 verification")
        if verbose:
            print(f"{name}: {size} bytes, md5 OK")
    return directory


def _checksum_ok(path, size, md5):
    if path.stat().st_size != size:
        return False
    digest = hashlib.md5(path.read_bytes()).hexdigest()
    return digest == md5
