#!/usr/bin/env python3
"""Write a 5000-example MNIST subset as IDX files.

The subset is the one bundled with the `mlxtend` package
(mlxtend/data/data/mnist_5k.csv.gz, one row per image: 784 pixels then the
label). Install it with `pip install --no-deps mlxtend`, or point --csv at a
copy of the CSV. Rows are shuffled with a fixed seed so that any prefix is
roughly class balanced.
"""
import argparse
import gzip
import os
import struct

import numpy as np


def default_csv():
    import mlxtend

    return os.path.join(os.path.dirname(mlxtend.__file__), "data", "data", "mnist_5k.csv.gz")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--csv", default=None, help="path to mnist_5k.csv.gz")
    parser.add_argument("--out", default="data/mnist5k", help="output directory")
    parser.add_argument("--seed", type=int, default=20190101)
    args = parser.parse_args()

    path = args.csv or default_csv()
    with gzip.open(path, "rt") as f:
        table = np.loadtxt(f, delimiter=",", dtype=np.int64)
    images = table[:, :-1].astype(np.uint8)
    labels = table[:, -1].astype(np.uint8)
    order = np.random.default_rng(args.seed).permutation(len(labels))
    images, labels = images[order], labels[order]

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "images-idx3-ubyte"), "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        f.write(images.tobytes())
    with open(os.path.join(args.out, "labels-idx1-ubyte"), "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.tobytes())
    print(f"wrote {len(labels)} examples to {args.out}; class counts {np.bincount(labels).tolist()}")


if __name__ == "__main__":
    main()
