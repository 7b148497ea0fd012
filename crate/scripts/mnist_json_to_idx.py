#!/usr/bin/env python3
"""Convert the 10,000-digit MNIST sample shipped in the `mnist` npm package
(src/digits/<d>.json, pixels normalised to [0, 1] with 3 decimals) into
gzip-compressed IDX files with an 80/20 per-class train/test split.

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist_json_to_idx.py package/src/digits data/mnist10k
"""
import gzip
import json
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(bytes(payload))


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        images = [flat[i : i + 784] for i in range(0, len(flat), 784)]
        cut = (len(images) * 4) // 5
        for idx, img in enumerate(images):
            pixels = [min(255, max(0, round(v * 255))) for v in img]
            imgs, labels = splits["train" if idx < cut else "t10k"]
            imgs.append(pixels)
            labels.append(digit)
    for name, (imgs, labels) in splits.items():
        n = len(imgs)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, [n, 28, 28],
                  [p for img in imgs for p in img])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, [n], labels)
        print(f"{name}: {n} samples")


if __name__ == "__main__":
    main()
