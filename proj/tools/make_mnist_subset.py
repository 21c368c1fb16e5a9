#!/usr/bin/env python3
"""Convert the digits bundled with the `mnist` npm package into IDX files.

The npm package (MIT licensed) ships 10,000 MNIST digits as JSON arrays of
floats rounded to three decimals. Every value is k/255 rounded, so the
original byte is recovered exactly by round(v * 255).

    npm pack mnist && tar xzf mnist-*.tgz
    python3 tools/make_mnist_subset.py package/src/digits data/
"""
import json
import pathlib
import struct
import sys


def main(src: str, dst: str) -> None:
    src_dir = pathlib.Path(src)
    out_dir = pathlib.Path(dst)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = bytearray()
    labels = bytearray()
    for digit in range(10):
        values = json.loads((src_dir / f"{digit}.json").read_text())["data"]
        if len(values) % 784:
            raise SystemExit(f"{digit}.json: {len(values)} values is not a multiple of 784")
        for v in values:
            b = round(v * 255)
            if abs(b / 255 - v) > 6e-4:
                raise SystemExit(f"{digit}.json: value {v} is not on the 8-bit lattice")
            pixels.append(b)
        labels.extend([digit] * (len(values) // 784))
    count = len(labels)
    (out_dir / "mnist10k-images-idx3-ubyte").write_bytes(
        struct.pack(">BBBBIII", 0, 0, 8, 3, count, 28, 28) + bytes(pixels))
    (out_dir / "mnist10k-labels-idx1-ubyte").write_bytes(
        struct.pack(">BBBBI", 0, 0, 8, 1, count) + bytes(labels))
    print(f"wrote {count} images to {out_dir}")


if __name__ == "__main__":
    if len(sys.argv) != 3:
        raise SystemExit(__doc__)
    main(sys.argv[1], sys.argv[2])
