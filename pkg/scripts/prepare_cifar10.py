"""Convert CIFAR-10 into the record layout read by ``capgan.core.load_dataset``.

Two source formats are understood:

* ``cifar-10-batches-py``: the python pickle batches from the dataset's
  home page (``data_batch_1`` ... ``test_batch``).
* PNG sprite sheets as shipped in the ``tfjs-cifar10`` npm package: one
  ``data_batch_N.png`` / ``test_batch.png`` per batch, 1024 pixels wide,
  one image per row in row-major HWC order, labels in
  ``train_lables.json`` / ``test_lables.json``.

Usage::

    python scripts/prepare_cifar10.py SOURCE_DIR OUT_DIR
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from capgan.core.data import CIFAR10_CLASSES, convert_cifar10_batches, write_split


def _read_sprite(path: Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    if arr.shape[1] != 1024:
        raise SystemExit(f"{path}: expected 1024 pixels per row, got {arr.shape[1]}")
    return arr.reshape(-1, 32, 32, 3)


def _labels(path: Path) -> np.ndarray:
    raw = json.loads(path.read_text())
    y = np.asarray(raw, dtype=np.int64)
    if y.ndim == 2:  # one-hot rows
        y = y.argmax(1)
    return y


def convert_sprites(source: Path, out_root: Path) -> None:
    train = np.concatenate([_read_sprite(source / f"data_batch_{i}.png") for i in range(1, 6)])
    test = _read_sprite(source / "test_batch.png")
    for split, x, label_file in (("train", train, "train_lables.json"), ("test", test, "test_lables.json")):
        y = _labels(source / label_file)
        if len(y) != len(x):
            raise SystemExit(f"{split}: {len(x)} images but {len(y)} labels")
        write_split(out_root / split, x, y, CIFAR10_CLASSES)
        print(f"{split}: {len(x)} images -> {out_root / split}")


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("source", type=Path)
    ap.add_argument("out", type=Path)
    args = ap.parse_args(argv)
    if (args.source / "data_batch_1").is_file():
        convert_cifar10_batches(args.source, args.out)
    elif (args.source / "data_batch_1.png").is_file():
        convert_sprites(args.source, args.out)
    else:
        print(f"no CIFAR-10 batches found in {args.source}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
