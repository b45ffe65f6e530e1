"""Dataset ingestion (IDX), Dirichlet partitioning, and split utilities."""

import gzip
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeding
from .errors import BadMagic, EmptyClass, TruncatedPayload

# Supported IDX types: unsigned byte, 1-D (labels) or 3-D (image stacks).
_MAGIC_U8_1D = 0x00000801
_MAGIC_U8_3D = 0x00000803


def read_idx(data: bytes) -> np.ndarray:
    """Decode an IDX byte string into a uint8 array of the declared shape."""
    if len(data) < 4:
        raise TruncatedPayload("IDX data shorter than the 4-byte magic")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == _MAGIC_U8_1D:
        ndim = 1
    elif magic == _MAGIC_U8_3D:
        ndim = 3
    else:
        raise BadMagic(f"unsupported IDX magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedPayload("IDX data shorter than its dimension header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims))
    if len(data) - header < count:
        raise TruncatedPayload(
            f"IDX payload holds {len(data) - header} bytes, shape {dims} needs {count}")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def write_idx(array: np.ndarray) -> bytes:
    """Inverse of read_idx for uint8 arrays of rank 1 or 3."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    if array.ndim == 1:
        magic = _MAGIC_U8_1D
    elif array.ndim == 3:
        magic = _MAGIC_U8_3D
    else:
        raise ValueError(f"IDX writer supports rank 1 or 3, got {array.ndim}")
    header = struct.pack(f">I{array.ndim}I", magic, *array.shape)
    return header + array.tobytes()


def load_idx_file(path) -> np.ndarray:
    """Read a raw or gzip-compressed IDX file (gzip detected by prefix)."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return read_idx(raw)


@dataclass
class Dataset:
    images: np.ndarray  # (N, input_dim) float64 in [0, 1]
    labels: np.ndarray  # (N,) ints in [0, num_classes)
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("image/label counts differ")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def take(self, indices) -> "Dataset":
        return Dataset(self.images[indices], self.labels[indices], self.num_classes)


def _pool2d(images: np.ndarray, factor: int) -> np.ndarray:
    n, rows, cols = images.shape
    if rows % factor or cols % factor:
        raise ValueError(f"image size {rows}x{cols} not divisible by downsample {factor}")
    return images.reshape(n, rows // factor, factor, cols // factor, factor).mean(axis=(2, 4))


def load_dataset(images_path, labels_path, downsample: int = 1) -> Dataset:
    """Load an IDX image/label pair, scale to [0,1], optionally mean-pool."""
    images = load_idx_file(images_path).astype(np.float64) / 255.0
    labels = load_idx_file(labels_path).astype(np.int64)
    if images.ndim != 3:
        raise ValueError("image file must hold a 3-D tensor")
    if downsample > 1:
        images = _pool2d(images, downsample)
    n = images.shape[0]
    if labels.shape[0] != n:
        raise ValueError(f"{n} images but {labels.shape[0]} labels")
    if labels.min() < 0 or labels.max() > 9:
        raise ValueError("labels outside [0, 10)")
    return Dataset(images.reshape(n, -1), labels)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label outside [0, {num_classes})")
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _largest_remainder(weights: np.ndarray, total: int) -> np.ndarray:
    """Integer allocation of `total` proportional to `weights` (sum to total)."""
    weights = np.asarray(weights, dtype=np.float64)
    shares = weights / weights.sum() * total
    counts = np.floor(shares).astype(np.int64)
    remainder = total - counts.sum()
    if remainder > 0:
        # stable argsort: ties go to the lower client index
        order = np.argsort(-(shares - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


@dataclass
class Partition:
    assignment: list          # per client, sorted sample-index array
    proportions: np.ndarray   # (M, C) label distribution q_i per client

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(a) for a in self.assignment])

    @property
    def empty_clients(self) -> list:
        return [i for i, a in enumerate(self.assignment) if len(a) == 0]


def dirichlet_partition(labels: np.ndarray, num_clients: int, alpha: float,
                        seed: int) -> Partition:
    """Label-skewed partition: q_i ~ Dir(alpha * 1_C) per client, then each
    class pool is allocated across clients proportionally to their q mass
    on that class (largest-remainder rounding). Every sample lands with
    exactly one client; clients may end up empty (warned, not fatal).
    """
    if num_clients < 1:
        raise ValueError("need at least one client")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    rng = seeding.stream(seed, seeding.PARTITION)
    q = rng.dirichlet(np.full(num_classes, alpha), size=num_clients)
    buckets = [[] for _ in range(num_clients)]
    for c in range(num_classes):
        pool = np.flatnonzero(labels == c)
        if pool.size == 0:
            raise EmptyClass(f"class {c} has no samples")
        pool = rng.permutation(pool)
        counts = _largest_remainder(q[:, c], pool.size)
        for i, chunk in enumerate(np.split(pool, np.cumsum(counts)[:-1])):
            buckets[i].append(chunk)
    assignment = [np.sort(np.concatenate(b)) if b else np.array([], dtype=np.int64)
                  for b in buckets]
    part = Partition(assignment, q)
    if part.empty_clients:
        warnings.warn(f"{len(part.empty_clients)} client(s) received zero samples: "
                      f"{part.empty_clients}", stacklevel=2)
    return part


def iid_partition(labels: np.ndarray, num_clients: int, seed: int) -> Partition:
    """Uniformly random near-equal split; proportions are empirical."""
    labels = np.asarray(labels)
    num_classes = int(labels.max()) + 1 if labels.size else 0
    rng = seeding.stream(seed, seeding.PARTITION)
    order = rng.permutation(labels.shape[0])
    assignment = [np.sort(chunk) for chunk in np.array_split(order, num_clients)]
    props = np.zeros((num_clients, num_classes))
    for i, idx in enumerate(assignment):
        if len(idx):
            props[i] = np.bincount(labels[idx], minlength=num_classes) / len(idx)
    return Partition(assignment, props)


def _stratified_indices(labels: np.ndarray, per_class: np.ndarray,
                        rng: np.random.Generator) -> np.ndarray:
    chosen = []
    for c, k in enumerate(per_class):
        pool = rng.permutation(np.flatnonzero(labels == c))
        chosen.append(pool[:k])
    return np.sort(np.concatenate(chosen))


def subset(dataset: Dataset, size: int, seed: int) -> Dataset:
    """Seeded stratified subset of `size` samples (class-proportional)."""
    if size >= len(dataset):
        return dataset
    counts = np.bincount(dataset.labels, minlength=dataset.num_classes)
    per_class = _largest_remainder(counts, size)
    rng = seeding.stream(seed, seeding.SUBSET)
    return dataset.take(_stratified_indices(dataset.labels, per_class, rng))


def split_validation(test: Dataset, ratio: float, seed: int):
    """Disjoint stratified split of `test` into (validation, holdout)."""
    if len(test) == 0:
        raise ValueError("cannot split an empty dataset")
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must lie strictly between 0 and 1")
    rng = seeding.stream(seed, seeding.VAL_SPLIT)
    val_rows = []
    hold_rows = []
    for c in range(test.num_classes):
        pool = rng.permutation(np.flatnonzero(test.labels == c))
        k = int(np.floor(ratio * pool.size + 0.5))
        val_rows.append(pool[:k])
        hold_rows.append(pool[k:])
    val = np.sort(np.concatenate(val_rows))
    hold = np.sort(np.concatenate(hold_rows))
    return test.take(val), test.take(hold)
