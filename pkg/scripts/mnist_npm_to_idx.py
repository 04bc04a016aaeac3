#!/usr/bin/env python3
"""Convert the 10,000 MNIST digits bundled in the ``mnist`` npm package into gzipped IDX files.

The package stores each digit class as a flat JSON array of pixel/255 values
rounded to three decimals, which round back to the original bytes exactly.
Usage:

    npm pack mnist            # writes mnist-<version>.tgz
    python scripts/mnist_npm_to_idx.py mnist-1.1.0.tgz data/mnist10k
"""
from __future__ import annotations

import argparse
import gzip
import json
import struct
import tarfile
from pathlib import Path

import numpy as np

SIDE = 28


def read_digits(tarball: Path) -> tuple[np.ndarray, np.ndarray]:
    images, labels = [], []
    with tarfile.open(tarball, "r:gz") as tf:
        for digit in range(10):
            member = tf.extractfile(f"package/src/digits/{digit}.json")
            if member is None:
                raise SystemExit(f"{tarball}: digit {digit} missing")
            values = np.asarray(json.load(member)["data"], dtype=np.float64)
            pixels = np.rint(values * 255.0)
            if values.size % (SIDE * SIDE) or pixels.min() < 0 or pixels.max() > 255:
                raise SystemExit(f"{tarball}: digit {digit} is not a stack of {SIDE}x{SIDE} images")
            block = pixels.astype(np.uint8).reshape(-1, SIDE, SIDE)
            images.append(block)
            labels.append(np.full(len(block), digit, dtype=np.uint8))
    return np.concatenate(images), np.concatenate(labels)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("tarball", type=Path)
    parser.add_argument("out_dir", type=Path)
    args = parser.parse_args()

    images, labels = read_digits(args.tarball)
    n = len(labels)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    # mtime=0 keeps the gzip bytes reproducible
    with gzip.GzipFile(args.out_dir / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, n, SIDE, SIDE))
        f.write(images.tobytes())
    with gzip.GzipFile(args.out_dir / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())
    print(f"wrote {n} images to {args.out_dir}")


if __name__ == "__main__":
    main()
