"""Dataset storage and loading.

On-disk layout, one directory per split::

    <root>/<split>/records.bin     N fixed-size records
    <root>/<split>/manifest.json   class names, counts, sha256 of records.bin

Each record is one unsigned label byte followed by H*W*C uint8 pixels in
row-major (H, W, C) order. The manifest is the source of truth for the
image shape and class names; the loader refuses files that disagree with it.
"""

from __future__ import annotations

import hashlib
import json
import os
import pickle
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from capgan.core.io import atomic_open, atomic_write_text
from capgan.core.types import ImageBatch

FORMAT = "capgan-records"
FORMAT_VERSION = 1
RECORDS = "records.bin"
MANIFEST = "manifest.json"

CIFAR10_CLASSES = (
    "airplane", "automobile", "bird", "cat", "deer",
    "dog", "frog", "horse", "ship", "truck",
)


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class Subset:
    """Filter applied at load time.

    ``classes`` keeps only those original labels (in the given order when
    relabelling); ``cap`` keeps at most that many samples per class, taking
    them in file order.
    """

    classes: Sequence[int] | None = None
    cap: int | None = None
    relabel: bool = False


class ImageDataset:
    """In-memory uint8 images with labels; iterating yields ``ImageBatch`` objects."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, class_names: Sequence[str], batch_size: int = 128):
        if images.ndim != 4 or images.dtype != np.uint8:
            raise ValueError(f"images must be uint8 (N, H, W, C), got {images.dtype} {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels must be a vector with one entry per image")
        self.images = images
        self.labels = labels.astype(np.int64)
        self.class_names = tuple(class_names)
        self.batch_size = batch_size

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __iter__(self) -> Iterator[ImageBatch]:
        return self.batches(self.batch_size)

    def batches(self, batch_size: int, order: np.ndarray | None = None) -> Iterator[ImageBatch]:
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            yield self.take(idx[start:start + batch_size])

    def shuffled(self, batch_size: int, rng: np.random.Generator) -> Iterator[ImageBatch]:
        return self.batches(batch_size, rng.permutation(len(self)))

    def take(self, index) -> ImageBatch:
        pixels = torch.from_numpy(self.images[index].astype(np.float32) / 255.0)
        return ImageBatch(pixels, torch.from_numpy(self.labels[index]))

    def as_batch(self) -> ImageBatch:
        return self.take(np.arange(len(self)))


def load_dataset(
    path: str | os.PathLike,
    split: str,
    subset: Subset | None = None,
    *,
    batch_size: int = 128,
    verify: bool = True,
) -> ImageDataset:
    split_dir = Path(path) / split
    manifest_path = split_dir / MANIFEST
    records_path = split_dir / RECORDS
    if not manifest_path.is_file() or not records_path.is_file():
        raise DatasetError(f"no dataset split at {split_dir} (expected {MANIFEST} and {RECORDS})")

    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT or manifest.get("version") != FORMAT_VERSION:
        raise DatasetError(
            f"{manifest_path}: unsupported format {manifest.get('format')!r} "
            f"version {manifest.get('version')!r}"
        )
    shape = tuple(manifest["shape"])
    class_names = manifest["class_names"]
    record_size = 1 + int(np.prod(shape))

    raw = np.fromfile(records_path, dtype=np.uint8)
    if raw.size % record_size:
        raise DatasetError(f"{records_path}: record {raw.size // record_size} is truncated")
    count = raw.size // record_size
    if count != manifest["count"]:
        raise DatasetError(f"{records_path}: manifest says {manifest['count']} records, file holds {count}")
    if verify:
        digest = hashlib.sha256(raw.tobytes()).hexdigest()
        if digest != manifest["sha256"]:
            raise DatasetError(f"{records_path}: checksum mismatch")

    table = raw.reshape(count, record_size)
    labels = table[:, 0].astype(np.int64)
    bad = np.nonzero(labels >= len(class_names))[0]
    if bad.size:
        raise DatasetError(f"{records_path}: record {bad[0]} has label {labels[bad[0]]}, "
                           f"but only {len(class_names)} classes exist")
    images = table[:, 1:].reshape((count,) + shape)

    if subset is not None:
        images, labels, class_names = _apply_subset(images, labels, class_names, subset)
    return ImageDataset(np.ascontiguousarray(images), labels, class_names, batch_size=batch_size)


def _apply_subset(images, labels, class_names, subset: Subset):
    classes = list(range(len(class_names))) if subset.classes is None else list(subset.classes)
    for c in classes:
        if not 0 <= c < len(class_names):
            raise DatasetError(f"subset class {c} is out of range for {len(class_names)} classes")
    keep = np.zeros(len(labels), dtype=bool)
    for c in classes:
        members = np.nonzero(labels == c)[0]
        if subset.cap is not None:
            members = members[:subset.cap]
        keep[members] = True
    idx = np.nonzero(keep)[0]
    images, labels = images[idx], labels[idx]
    if subset.relabel:
        lookup = {c: i for i, c in enumerate(classes)}
        labels = np.array([lookup[int(v)] for v in labels], dtype=np.int64)
        class_names = [class_names[c] for c in classes]
    return images, labels, class_names


def write_split(out_dir: str | os.PathLike, images: np.ndarray, labels: np.ndarray, class_names: Sequence[str]) -> Path:
    """Write one split in the record layout. Returns the split directory."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise ValueError("images must be uint8 (N, H, W, C)")
    if labels.shape != (images.shape[0],) or labels.min(initial=0) < 0 or labels.max(initial=0) >= len(class_names):
        raise ValueError("labels must be one integer in [0, K) per image")
    out_dir = Path(out_dir)
    n = images.shape[0]
    table = np.empty((n, 1 + int(np.prod(images.shape[1:]))), dtype=np.uint8)
    table[:, 0] = labels
    table[:, 1:] = images.reshape(n, -1)
    payload = table.tobytes()
    with atomic_open(out_dir / RECORDS, "wb") as fh:
        fh.write(payload)
    manifest = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "shape": list(images.shape[1:]),
        "count": n,
        "class_names": list(class_names),
        "class_counts": np.bincount(labels, minlength=len(class_names)).tolist(),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    atomic_write_text(out_dir / MANIFEST, json.dumps(manifest, indent=2) + "\n")
    return out_dir


def convert_cifar10_batches(source: str | os.PathLike, out_root: str | os.PathLike) -> None:
    """Convert the standard ``cifar-10-batches-py`` pickles into the record layout."""
    source = Path(source)

    def read(names):
        xs, ys = [], []
        for name in names:
            f = source / name
            if not f.is_file():
                raise DatasetError(f"missing CIFAR-10 batch file {f}")
            with open(f, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1))
            ys.append(np.asarray(d[b"labels"], dtype=np.int64))
        return np.concatenate(xs), np.concatenate(ys)

    x, y = read([f"data_batch_{i}" for i in range(1, 6)])
    write_split(Path(out_root) / "train", x, y, CIFAR10_CLASSES)
    x, y = read(["test_batch"])
    write_split(Path(out_root) / "test", x, y, CIFAR10_CLASSES)
