#!/usr/bin/env python3
"""Build the 5000/1000 MNIST subset used by the desk-scale runs.

Source: the 10k digit sample shipped in the `mnist` npm package
(`npm pack mnist`, src/digits/<d>.json, pixel values already divided by 255
and rounded to 3 decimals). Pixels are mapped back to bytes and written as
gzipped IDX files.

usage: make_mnist_subset.py <unpacked npm package dir> <out dir>
"""
import gzip
import json
import os
import struct
import sys

import numpy as np


def write_idx(path, arr, magic):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in arr.shape:
            f.write(struct.pack(">I", d))
        f.write(arr.astype(np.uint8).tobytes())


def main():
    src, out = sys.argv[1], sys.argv[2]
    images, labels = [], []
    for d in range(10):
        with open(os.path.join(src, "src", "digits", f"{d}.json")) as f:
            data = np.asarray(json.load(f)["data"], dtype=np.float64)
        px = np.rint(data * 255.0).clip(0, 255).reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.default_rng(0).permutation(len(labels))
    images, labels = images[order], labels[order]
    os.makedirs(out, exist_ok=True)
    write_idx(os.path.join(out, "train-images-idx3-ubyte.gz"), images[:5000], 0x803)
    write_idx(os.path.join(out, "train-labels-idx1-ubyte.gz"), labels[:5000], 0x801)
    write_idx(os.path.join(out, "t10k-images-idx3-ubyte.gz"), images[5000:6000], 0x803)
    write_idx(os.path.join(out, "t10k-labels-idx1-ubyte.gz"), labels[5000:6000], 0x801)


if __name__ == "__main__":
    main()
