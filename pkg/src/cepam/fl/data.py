"""MNIST IDX loading, a synthetic fallback, and client partitioning."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..layered_noise import standard_normals
from ..rng import RandomStream

log = logging.getLogger(__name__)

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    source: str

    @property
    def features(self) -> int:
        return self.x_train.shape[1]


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Parse a uint8 IDX file (optionally gzipped); validates magic and size."""
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxError(f"{path}: truncated header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic >> 8 != 0x08:
        raise IdxError(f"{path}: unsupported IDX type 0x{magic:08x}")
    if expected_magic is not None and magic != expected_magic:
        raise IdxError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    count = int(np.prod(dims, dtype=np.int64))
    if len(body) != count:
        raise IdxError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    path = Path(path)
    with (gzip.open(path, "wb") if path.suffix == ".gz" else open(path, "wb")) as fh:
        fh.write(header + array.tobytes())


def _find(data_dir: Path, stem: str) -> Path | None:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).is_file():
            return data_dir / name
    return None


def _pair(data_dir: Path, images: str, labels: str) -> tuple[np.ndarray, np.ndarray]:
    ip, lp = _find(data_dir, MNIST_FILES[images]), _find(data_dir, MNIST_FILES[labels])
    if ip is None or lp is None:
        raise FileNotFoundError(f"MNIST files missing in {data_dir}")
    x = read_idx(ip, IMAGES_MAGIC)
    y = read_idx(lp, LABELS_MAGIC)
    if x.ndim != 3 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise IdxError(f"{data_dir}: image/label counts disagree ({x.shape[0]} vs {y.shape[0]})")
    return x.reshape(x.shape[0], -1).astype(np.float64) / 255.0, y.astype(np.int64)


def _take(n: int, have: int, what: str) -> int:
    if n > have:
        log.warning("requested %d %s examples but only %d are available", n, what, have)
        return have
    return n


def load_mnist(data_dir, n_train: int, n_val: int, n_test: int, stream: RandomStream) -> Dataset:
    """Random subset of MNIST; validation examples are held out of the training files."""
    data_dir = Path(data_dir)
    xtr, ytr = _pair(data_dir, "train_images", "train_labels")
    xte, yte = _pair(data_dir, "test_images", "test_labels")
    order = np.argsort(stream.spawn(0).uniform(len(ytr)), kind="stable")
    n_val = _take(n_val, len(ytr), "validation")
    n_train = _take(n_train, len(ytr) - n_val, "training")
    val, train = order[:n_val], order[n_val : n_val + n_train]
    test = np.argsort(stream.spawn(1).uniform(len(yte)), kind="stable")[: _take(n_test, len(yte), "test")]
    return Dataset(xtr[train], ytr[train], xtr[val], ytr[val], xte[test], yte[test], f"mnist:{data_dir}")


def synthetic_clusters(
    n_train: int,
    n_val: int,
    n_test: int,
    stream: RandomStream,
    dim: int = 784,
    classes: int = 10,
    separation: float = 0.1,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters around random centres."""
    centres = separation * _normals(stream.spawn(0), classes * dim).reshape(classes, dim)

    def draw(child: int, count: int):
        s = stream.spawn(child)
        y = s.integers(classes, count).astype(np.int64)
        x = centres[y] + _normals(s.spawn(0), count * dim).reshape(count, dim)
        return x, y

    (xtr, ytr), (xv, yv), (xte, yte) = draw(1, n_train), draw(2, n_val), draw(3, n_test)
    return Dataset(xtr, ytr, xv, yv, xte, yte, "synthetic")


def _normals(stream: RandomStream, count: int) -> np.ndarray:
    return standard_normals(stream.words(2 * ((count + 1) // 2)))[:count]


def load_dataset(
    data_dir,
    n_train: int,
    n_val: int,
    n_test: int,
    stream: RandomStream,
) -> Dataset:
    """MNIST from ``data_dir`` (or ``$CEPAM_DATA_DIR``); synthetic clusters if absent."""
    if data_dir is None:
        data_dir = os.environ.get("CEPAM_DATA_DIR")
    if data_dir is not None:
        try:
            return load_mnist(data_dir, n_train, n_val, n_test, stream)
        except FileNotFoundError:
            pass
    log.warning("MNIST not found (data_dir=%s); falling back to synthetic Gaussian clusters", data_dir)
    return synthetic_clusters(n_train, n_val, n_test, stream)


def partition_clients(labels: np.ndarray, clients: int, stream: RandomStream, iid: bool = True) -> list[np.ndarray]:
    """Equal-size client shards; any remainder is dropped.

    ``iid=False`` sorts by label first, so each shard covers few classes.
    """
    n = len(labels)
    if clients < 1 or n < clients:
        raise ValueError(f"cannot split {n} examples across {clients} clients")
    if iid:
        order = np.argsort(stream.uniform(n), kind="stable")
    else:
        order = np.argsort(labels, kind="stable")
    per = n // clients
    return [np.sort(order[k * per : (k + 1) * per]) for k in range(clients)]
