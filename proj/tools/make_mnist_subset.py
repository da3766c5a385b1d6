#!/usr/bin/env python3
"""Convert the 10k-digit MNIST sample shipped in the `mnist` npm package
(https://www.npmjs.com/package/mnist, src/digits/<d>.json) into gzipped IDX
files: 8000 training and 2000 test images.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/mnist-subset
"""
import gzip
import json
import pathlib
import random
import struct
import sys


def write_idx_images(path, images):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def main(src, dst):
    src, dst = pathlib.Path(src), pathlib.Path(dst)
    samples = []
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for k in range(len(data) // 784):
            pix = [min(255, max(0, round(v * 255))) for v in data[k * 784:(k + 1) * 784]]
            samples.append((pix, digit))
    random.Random(20231015).shuffle(samples)
    train, test = samples[:8000], samples[8000:10000]
    dst.mkdir(parents=True, exist_ok=True)
    write_idx_images(dst / "train-images-idx3-ubyte.gz", [s[0] for s in train])
    write_idx_labels(dst / "train-labels-idx1-ubyte.gz", [s[1] for s in train])
    write_idx_images(dst / "t10k-images-idx3-ubyte.gz", [s[0] for s in test])
    write_idx_labels(dst / "t10k-labels-idx1-ubyte.gz", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test images to {dst}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
