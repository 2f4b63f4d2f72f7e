#!/usr/bin/env python3
# SPDX-FileCopyrightText: © 2026 The dfp16 Authors
#
# SPDX-License-Identifier: Apache-2.0
"""Convert the digit JSON files shipped in the `mnist` npm package (10000 MNIST
samples) into gzipped IDX files: 8000 train / 2000 test, fixed shuffle."""
import argparse
import gzip
import json
import pathlib
import struct

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", help="package/src/digits from `npm pack mnist`")
    ap.add_argument("out_dir")
    ap.add_argument("--train", type=int, default=8000)
    args = ap.parse_args()

    images, labels = [], []
    for d in range(10):
        data = json.load(open(pathlib.Path(args.digits_dir) / f"{d}.json"))["data"]
        px = np.rint(np.asarray(data, dtype=np.float64) * 255.0).clip(0, 255).astype(np.uint8)
        px = px.reshape(-1, 28, 28)
        images.append(px)
        labels.append(np.full(len(px), d, dtype=np.uint8))
    images = np.concatenate(images)
    labels = np.concatenate(labels)
    order = np.random.RandomState(20180223).permutation(len(images))
    images, labels = images[order], labels[order]

    out = pathlib.Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = args.train
    for prefix, sl in (("train", slice(0, n)), ("t10k", slice(n, None))):
        im, lb = images[sl], labels[sl]
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", 0x803, im.shape, im)
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", 0x801, lb.shape, lb)
        print(prefix, im.shape, np.bincount(lb, minlength=10))


if __name__ == "__main__":
    main()
