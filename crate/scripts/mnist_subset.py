#!/usr/bin/env python3
"""Build IDX-format MNIST files from the 10,000 digits bundled in the npm
`mnist` package (github.com/cazala/mnist).

Usage: scripts/mnist_subset.py <unpacked npm package dir> <out dir>

Per class, the first 80% of digits go to train-*, the rest to t10k-*.
Rows are then shuffled with a fixed seed. Pixel values are stored as
round(255 * v).
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path

ROWS = COLS = 28


def write_idx(out: Path, stem: str, rows):
    images = bytearray(struct.pack(">IIII", 0x00000803, len(rows), ROWS, COLS))
    labels = bytearray(struct.pack(">II", 0x00000801, len(rows)))
    for pixels, label in rows:
        images.extend(pixels)
        labels.append(label)
    # mtime=0 keeps the archives byte-reproducible
    for name, payload in ((f"{stem}-images-idx3-ubyte.gz", images), (f"{stem}-labels-idx1-ubyte.gz", labels)):
        with open(out / name, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as f:
            f.write(payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        n = len(flat) // (ROWS * COLS)
        split = int(n * 0.8)
        for k in range(n):
            px = bytes(min(255, max(0, round(v * 255))) for v in flat[k * 784:(k + 1) * 784])
            (train if k < split else test).append((px, digit))
    rng = random.Random(20180000)
    rng.shuffle(train)
    rng.shuffle(test)
    write_idx(out, "train", train)
    write_idx(out, "t10k", test)
    print(f"train={len(train)} t10k={len(test)}")


if __name__ == "__main__":
    main()
