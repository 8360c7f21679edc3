#!/usr/bin/env python3
"""Convert the CIFAR-10 binary distribution into a record corpus.

Reads data_batch_1..5.bin and test_batch.bin from SRC and writes
train.bin, test.bin and manifest.yaml to OUT. The record layout (one label
byte, then 3x32x32 channel-planar pixels) is the same, so records are
copied as they are; only the per-channel mean and std are computed.
"""
import argparse
import sys
from pathlib import Path

import numpy as np

RES = 32
RECORD = 1 + 3 * RES * RES


def load(paths):
    blobs = []
    for p in paths:
        data = p.read_bytes()
        if len(data) % RECORD:
            raise ValueError(f"{p}: size {len(data)} is not a multiple of {RECORD}")
        blobs.append(np.frombuffer(data, dtype=np.uint8).reshape(-1, RECORD))
    return np.concatenate(blobs)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("src", type=Path, help="cifar-10-batches-bin directory")
    ap.add_argument("out", type=Path)
    ap.add_argument("--name", default="cifar10")
    ap.add_argument("--train-limit", type=int, default=0, help="keep only the first N training records")
    args = ap.parse_args(argv)

    try:
        train = load([args.src / f"data_batch_{i}.bin" for i in range(1, 6)])
        test = load([args.src / "test_batch.bin"])
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    if args.train_limit > 0:
        train = train[: args.train_limit]
    for name, rec in (("train", train), ("test", test)):
        if rec[:, 0].max() >= 10:
            print(f"error: {name} has a label outside 0..9", file=sys.stderr)
            return 2

    pixels = train[:, 1:].reshape(-1, 3, RES * RES).astype(np.float64) / 255.0
    mean = pixels.mean(axis=(0, 2))
    std = pixels.std(axis=(0, 2))

    args.out.mkdir(parents=True, exist_ok=True)
    (args.out / "train.bin").write_bytes(train.tobytes())
    (args.out / "test.bin").write_bytes(test.tobytes())
    fmt = lambda v: "[" + ", ".join(f"{x:.9g}" for x in v) + "]"
    (args.out / "manifest.yaml").write_text(
        f"name: {args.name}\n"
        f"num_classes: 10\n"
        f"source_resolution: {RES}\n"
        f"channels: 3\n"
        f"mean: {fmt(mean)}\n"
        f"std: {fmt(std)}\n"
        f"splits:\n"
        f"  train: {{file: train.bin, count: {len(train)}}}\n"
        f"  test: {{file: test.bin, count: {len(test)}}}\n")
    print(f"wrote {args.out / 'manifest.yaml'} ({len(train)} train, {len(test)} test)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
