#!/usr/bin/env python3
"""Convert the digit subset bundled with the `mnist` npm package into IDX files.

The npm package ships ~10k MNIST digits as JSON arrays of intensities in
[0, 1] (one file per class).  This script writes them as a standard
idx3-ubyte image file plus an idx1-ubyte label file, ordered by class.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/mnist_npm_to_idx.py package/src/digits data/
"""

import argparse
import json
import pathlib
import struct


def main() -> None:
    parser = argparse.ArgumentParser()
    parser.add_argument("digits_dir", type=pathlib.Path)
    parser.add_argument("out_dir", type=pathlib.Path)
    args = parser.parse_args()

    images = bytearray()
    labels = bytearray()
    count = 0
    for digit in range(10):
        raw = json.loads((args.digits_dir / f"{digit}.json").read_text())["data"]
        n = len(raw) // 784
        for v in raw[: n * 784]:
            images.append(max(0, min(255, round(v * 255))))
        labels.extend([digit] * n)
        count += n

    args.out_dir.mkdir(parents=True, exist_ok=True)
    with open(args.out_dir / "mnist-subset-images.idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, count, 28, 28))
        f.write(images)
    with open(args.out_dir / "mnist-subset-labels.idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, count))
        f.write(labels)
    print(f"wrote {count} images")


if __name__ == "__main__":
    main()
