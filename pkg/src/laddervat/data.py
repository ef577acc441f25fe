"""IDX ingestion, balanced few-label splits and per-epoch batch streams."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .numerics import RngStream

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
N_CLASSES = 10

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DataError(ValueError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    return path.read_bytes()


def parse_idx(raw: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into an integer array of its shape."""
    if len(raw) < 4:
        raise IdxFormatError("truncated header", len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08:
        raise IdxFormatError(f"bad magic 0x{int.from_bytes(raw[:4], 'big'):08x}", 0)
    header_end = 4 + 4 * ndim
    if len(raw) < header_end:
        raise IdxFormatError("truncated dimension header", len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header_end])
    count = 1
    for d in dims:
        count *= d
        if count > 2**40:
            raise IdxFormatError(f"dimensions {dims} overflow", 4)
    if len(raw) - header_end < count:
        raise IdxFormatError(f"truncated payload: need {count} bytes, have {len(raw) - header_end}",
                             len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def load_idx(path) -> np.ndarray:
    """Load an IDX file (raw or ``.gz``).

    Image files (3-d) come back as ``(N, rows*cols)`` float32 scaled by 1/255;
    label files as int64 vectors.
    """
    raw = _read_bytes(path)
    magic = int.from_bytes(raw[:4], "big") if len(raw) >= 4 else None
    arr = parse_idx(raw)
    if magic == IMAGES_MAGIC:
        return (arr.reshape(arr.shape[0], -1).astype(np.float32) / np.float32(255.0))
    if magic == LABELS_MAGIC:
        return arr.astype(np.int64)
    return arr


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.images.ndim != 2:
            raise DataError(f"images must be 2-d, got shape {self.images.shape}")
        if self.labels is not None:
            if len(self.labels) != len(self.images):
                raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
            if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= N_CLASSES):
                raise DataError("labels outside 0..9")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], None if self.labels is None else self.labels[idx])


@dataclass(frozen=True)
class SemiSupervisedSplit:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset | None = None
    labeled_index: np.ndarray | None = None


def _resolve(data_dir: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    # torchvision-style dotted names
    dotted = stem.replace("-idx", ".idx")
    for name in (dotted, dotted + ".gz"):
        if (data_dir / name).exists():
            return data_dir / name
    raise FileNotFoundError(f"no {stem}[.gz] under {data_dir}")


def mnist_paths(data_dir) -> dict[str, Path]:
    data_dir = Path(data_dir)
    return {key: _resolve(data_dir, stem) for key, stem in MNIST_FILES.items()}


def load_mnist(data_dir) -> tuple[Dataset, Dataset]:
    paths = mnist_paths(data_dir)
    train = Dataset(load_idx(paths["train_images"]), load_idx(paths["train_labels"]))
    test = Dataset(load_idx(paths["test_images"]), load_idx(paths["test_labels"]))
    return train, test


def make_split(train: Dataset, test: Dataset | None, n_labels: int,
               rng: RngStream) -> SemiSupervisedSplit:
    """Draw ``n_labels / 10`` examples per class; the unlabeled side keeps every image."""
    if train.labels is None:
        raise DataError("training set has no labels")
    if n_labels % N_CLASSES:
        raise DataError(f"n_labels={n_labels} is not divisible by {N_CLASSES}")
    per_class = n_labels // N_CLASSES
    picked = []
    for c in range(N_CLASSES):
        members = np.flatnonzero(train.labels == c)
        if len(members) < per_class:
            raise DataError(f"class {c} has {len(members)} examples, need {per_class}")
        picked.append(np.sort(rng.child("class", c).choice(members, per_class)))
    index = np.concatenate(picked)
    return SemiSupervisedSplit(
        labeled=train.subset(index),
        unlabeled=Dataset(train.images),
        test=test,
        labeled_index=index,
    )


def steps_per_epoch(split: SemiSupervisedSplit, unlabeled_batch: int) -> int:
    return len(split.unlabeled) // unlabeled_batch


def batch_stream(split: SemiSupervisedSplit, labeled_batch: int, unlabeled_batch: int,
                 rng: RngStream, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield ``(x_labeled, y_labeled, x_unlabeled)`` for one epoch.

    The unlabeled set is shuffled and traversed once; the labeled set is
    cycled through fresh permutations so every step gets a full batch.
    """
    if labeled_batch < 1 or unlabeled_batch < 1:
        raise ValueError("batch sizes must be >= 1")
    n_steps = steps_per_epoch(split, unlabeled_batch)
    order_u = rng.child("unlabeled", epoch).permutation(len(split.unlabeled))
    lab_rng = rng.child("labeled", epoch)
    n_lab = len(split.labeled)
    need = n_steps * labeled_batch
    order_l = np.concatenate([lab_rng.permutation(n_lab) for _ in range(-(-need // n_lab))])
    for s in range(n_steps):
        iu = order_u[s * unlabeled_batch:(s + 1) * unlabeled_batch]
        il = order_l[s * labeled_batch:(s + 1) * labeled_batch]
        yield split.labeled.images[il], split.labeled.labels[il], split.unlabeled.images[iu]
