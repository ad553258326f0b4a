#!/usr/bin/env python3
"""Write MNIST digits in IDX format for label_shard / dirichlet configs.

The digits come from the `mnist` npm package (about 10,000 handwritten
digits, 1,000 per class, pixels scaled to [0,1]), which is reachable through
the npm registry when the original IDX archives are not. If you already have
the original files, point `dataset.idx_images` / `dataset.idx_labels` at
them instead.

Usage: tools/fetch_mnist.py [--out data/mnist] [--package path/to/mnist.tgz]
"""

import argparse
import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    out = subprocess.run(["npm", "pack", "mnist@1.1.0", "--silent"], cwd=workdir, check=True,
                         capture_output=True, text=True)
    return workdir / out.stdout.strip().splitlines()[-1]


def read_digits(tgz: pathlib.Path):
    images, labels = [], []
    with tarfile.open(tgz) as tar:
        for digit in range(10):
            member = tar.getmember(f"package/src/digits/{digit}.json")
            flat = json.load(tar.extractfile(member))["data"]
            if len(flat) % 784:
                sys.exit(f"digit {digit}: {len(flat)} values is not a multiple of 784")
            for i in range(0, len(flat), 784):
                images.append(bytes(min(255, max(0, round(v * 255))) for v in flat[i:i + 784]))
                labels.append(digit)
    return images, labels


def write_idx(out: pathlib.Path, images, labels):
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(img)
    with open(out / "train-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default="data/mnist", type=pathlib.Path)
    ap.add_argument("--package", type=pathlib.Path, help="use this mnist-*.tgz instead of running npm pack")
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        tgz = args.package or fetch_package(pathlib.Path(tmp))
        images, labels = read_digits(tgz)
    write_idx(args.out, images, labels)
    print(f"wrote {len(images)} digits to {args.out}")


if __name__ == "__main__":
    main()
