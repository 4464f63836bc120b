#!/usr/bin/env python3
"""Build a desk-scale MNIST subset in IDX format from package-bundled digits.

Source: the npm package `mnist` (10,000 real MNIST digits, 1,000 per class),
fetched through the npm index so no dataset server is needed. The digits are
split class-balanced into 8,000 training and 2,000 held-out test images.

Writes train-images-idx3-ubyte, train-labels-idx1-ubyte,
t10k-images-idx3-ubyte and t10k-labels-idx1-ubyte into the output directory.
"""
import argparse
import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile


def write_idx_images(path, images, rows=28, cols=28):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def npm_digits(workdir):
    subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=workdir, check=True,
                   stdout=subprocess.DEVNULL)
    tgz = next(pathlib.Path(workdir).glob("mnist-*.tgz"))
    images, labels, ranks = [], [], []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            flat = json.load(tar.extractfile(member))["data"]
            for rank, start in enumerate(range(0, len(flat), 784)):
                images.append([round(v * 255) for v in flat[start:start + 784]])
                labels.append(digit)
                ranks.append(rank)
    return images, labels, ranks


def split(images, labels, ranks, test_per_class):
    """Last test_per_class digits of every class go to the test split."""
    counts = [labels.count(d) for d in range(10)]
    train, test = [], []
    for i, (label, rank) in enumerate(zip(labels, ranks)):
        (test if rank >= counts[label] - test_per_class else train).append(i)
    # Interleave classes by within-class rank.
    train.sort(key=lambda i: (ranks[i], labels[i]))
    test.sort(key=lambda i: (ranks[i], labels[i]))
    return train, test


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="data/mnist")
    parser.add_argument("--test-per-class", type=int, default=200)
    args = parser.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        images, labels, ranks = npm_digits(tmp)
    train, test = split(images, labels, ranks, args.test_per_class)
    train_x, train_y = [images[i] for i in train], [labels[i] for i in train]
    test_x, test_y = [images[i] for i in test], [labels[i] for i in test]
    write_idx_images(out / "train-images-idx3-ubyte", train_x)
    write_idx_labels(out / "train-labels-idx1-ubyte", train_y)
    write_idx_images(out / "t10k-images-idx3-ubyte", test_x)
    write_idx_labels(out / "t10k-labels-idx1-ubyte", test_y)
    print(f"wrote {len(train_x)} train / {len(test_x)} test images to {out}")


if __name__ == "__main__":
    main()
