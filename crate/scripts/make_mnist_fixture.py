"""Rebuild data/mnist-5k from the 5,000-digit MNIST sample shipped in the mlxtend wheel.

    pip download --no-deps mlxtend -d /tmp/mlx
    python3 scripts/make_mnist_fixture.py /tmp/mlx/mlxtend-*.whl

Writes gzipped IDX files: 4,000 train / 1,000 test, shuffled with a fixed seed.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload.astype(np.uint8).tobytes())


def main(wheel):
    raw = zipfile.ZipFile(wheel).read("mlxtend/data/data/mnist_5k.csv.gz")
    table = np.loadtxt(io.StringIO(gzip.decompress(raw).decode()), delimiter=",")
    images, labels = table[:, :784], table[:, 784]
    order = np.random.RandomState(20220101).permutation(len(labels))
    images, labels = images[order], labels[order]
    out = "data/mnist-5k"
    for name, sl in (("train", slice(0, 4000)), ("t10k", slice(4000, 5000))):
        n = sl.stop - sl.start
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", 0x803, (n, 28, 28), images[sl])
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", 0x801, (n,), labels[sl])


if __name__ == "__main__":
    main(sys.argv[1])
