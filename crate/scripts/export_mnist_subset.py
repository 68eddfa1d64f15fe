#!/usr/bin/env python3
"""Export a class-balanced MNIST subset as an IDX image file.

Source: the `mnist` npm package (MIT), which ships 28x28 digits as JSON
arrays of pixel intensities in [0, 1] rounded to three decimals, one file
per digit class.

    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/export_mnist_subset.py package/src/digits out.idx --count 1100

Image k is taken from class k % 10, sample k // 10, so every prefix of the
file is (nearly) class balanced.
"""
import argparse
import json
import pathlib
import struct

SIDE = 28


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out", type=pathlib.Path)
    ap.add_argument("--count", type=int, default=1100)
    args = ap.parse_args()

    classes = []
    for d in range(10):
        data = json.loads((args.digits_dir / f"{d}.json").read_text())["data"]
        classes.append(data)

    plane = SIDE * SIDE
    payload = bytearray()
    for k in range(args.count):
        data = classes[k % 10]
        start = (k // 10) * plane
        if start + plane > len(data):
            raise SystemExit(f"class {k % 10} has too few samples for count {args.count}")
        payload.extend(min(255, max(0, round(v * 255))) for v in data[start:start + plane])

    header = struct.pack(">IIII", 0x00000803, args.count, SIDE, SIDE)
    args.out.write_bytes(header + bytes(payload))


if __name__ == "__main__":
    main()
