#!/usr/bin/env python3
"""Build a 10k-digit MNIST subset in gzipped IDX format.

The digits come from the `mnist` npm package (10 000 samples stored as
JSON arrays of pixel intensities in [0, 1]). Output:

    <out>/images-idx3-ubyte.gz
    <out>/labels-idx1-ubyte.gz
"""
import argparse
import gzip
import json
import os
import pathlib
import struct
import subprocess
import tarfile
import tempfile


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="data/mnist-10k")
    args = ap.parse_args()
    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       stdout=subprocess.DEVNULL)
        with tarfile.open(os.path.join(tmp, "mnist-1.1.0.tgz")) as tar:
            tar.extractall(tmp)
        digits = pathlib.Path(tmp) / "package" / "src" / "digits"
        images, labels = [], []
        for d in range(10):
            data = json.loads((digits / f"{d}.json").read_text())["data"]
            n = len(data) // 784
            for k in range(n):
                px = data[k * 784:(k + 1) * 784]
                images.append(bytes(min(255, max(0, round(v * 255))) for v in px))
                labels.append(d)

    # interleave classes deterministically so prefixes stay class-balanced
    order = sorted(range(len(labels)), key=lambda i: ((i * 7919) % len(labels)))
    with gzip.GzipFile(out / "images-idx3-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(order), 28, 28))
        for i in order:
            f.write(images[i])
    with gzip.GzipFile(out / "labels-idx1-ubyte.gz", "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(order)))
        f.write(bytes(labels[i] for i in order))
    print(f"wrote {len(order)} samples to {out}")


if __name__ == "__main__":
    main()
