#!/usr/bin/env python3
"""Build the desk-scale MNIST split used by the test suite.

Source: the 10,000 MNIST digits bundled in the `mnist` npm package
(https://github.com/cazala/mnist, MIT). Pixels there are byte/255 rounded to
three decimals, so bytes are recovered exactly with round(v * 255).

Writes gzip-compressed IDX files (8,000 train / 2,000 held-out):

    train-images-idx3-ubyte.gz  train-labels-idx1-ubyte.gz
    t10k-images-idx3-ubyte.gz   t10k-labels-idx1-ubyte.gz

Usage: make_mnist_desk.py <path/to/mnist/package> <out dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    pkg, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for digit in range(10):
        flat = json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            samples.append((pixels, digit))
    random.Random(20230117).shuffle(samples)
    splits = {"train": samples[:8000], "t10k": samples[8000:]}
    for name, rows in splits.items():
        n = len(rows)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [n, 28, 28], b"".join(p for p, _ in rows))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [n], bytes(l for _, l in rows))
        print(name, n)


if __name__ == "__main__":
    main()
