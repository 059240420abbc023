#!/usr/bin/env python3
"""Materialize the bundled 10,000-digit MNIST subset as IDX files.

Pulls the `mnist` npm package (MIT; ships ~1,000 examples per digit as
normalized-pixel JSON derived from the original MNIST files), converts the
pixels back to u8, and writes standard IDX image/label files under
data/mnist/. Examples are interleaved across digits with a fixed shuffle so
any prefix of the files is approximately class-balanced.

Usage: python3 scripts/fetch_mnist.py [outdir]
Requires `npm` with registry access. Run once; the output is deterministic.
"""

import json
import pathlib
import random
import struct
import subprocess
import sys
import tempfile

ROWS = COLS = 28


def fetch_package(workdir: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        ["npm", "pack", "mnist@1.1.0"],
        cwd=workdir,
        check=True,
        stdout=subprocess.DEVNULL,
        stderr=subprocess.DEVNULL,
    )
    tarball = next(workdir.glob("mnist-*.tgz"))
    subprocess.run(["tar", "xzf", tarball.name], cwd=workdir, check=True)
    return workdir / "package" / "src" / "digits"


def load_examples(digits_dir: pathlib.Path):
    examples = []
    for digit in range(10):
        with open(digits_dir / f"{digit}.json") as f:
            flat = json.load(f)["data"]
        count = len(flat) // (ROWS * COLS)
        assert count * ROWS * COLS == len(flat), f"ragged data for digit {digit}"
        for i in range(count):
            pixels = flat[i * ROWS * COLS : (i + 1) * ROWS * COLS]
            # Pixels were stored as value/255 rounded to 3 decimals; invert.
            raw = bytes(min(255, max(0, round(p * 255))) for p in pixels)
            examples.append((raw, digit))
    return examples


def write_idx(examples, outdir: pathlib.Path):
    outdir.mkdir(parents=True, exist_ok=True)
    n = len(examples)
    with open(outdir / "images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, ROWS, COLS))
        for raw, _ in examples:
            f.write(raw)
    with open(outdir / "labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(bytes(label for _, label in examples))


def main():
    outdir = pathlib.Path(sys.argv[1] if len(sys.argv) > 1 else "data/mnist")
    with tempfile.TemporaryDirectory() as tmp:
        digits_dir = fetch_package(pathlib.Path(tmp))
        examples = load_examples(digits_dir)
    assert len(examples) == 10_000, f"expected 10,000 examples, got {len(examples)}"
    random.Random(20240813).shuffle(examples)
    write_idx(examples, outdir)
    print(f"wrote {len(examples)} examples to {outdir}/")


if __name__ == "__main__":
    main()
