"""Write an MNIST subset as IDX files.

The sandbox cannot reach the usual MNIST mirrors, so this takes the 5000-image
training subset bundled with mlxtend (500 per digit) and splits it per class
into 4000 train / 1000 test images. If the four original IDX files are
already present in the target directory nothing is done.

    python scripts/fetch_mnist.py --out data/mnist
"""
import argparse
from pathlib import Path

import numpy as np

from ghostcl.data import write_idx
from ghostcl.engine import MNIST_FILES


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/mnist")
    ap.add_argument("--test-per-class", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out)
    if all((out / f).exists() for f in MNIST_FILES):
        print(f"{out}: IDX files already present")
        return
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = np.rint(x).astype(np.uint8).reshape(-1, 28, 28)
    y = y.astype(np.uint8)
    rng = np.random.default_rng(args.seed)
    test = np.zeros(len(y), dtype=bool)
    for c in range(10):
        idx = np.flatnonzero(y == c)
        test[rng.permutation(idx)[: args.test_per_class]] = True
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in zip(MNIST_FILES, (x[~test], y[~test], x[test], y[test])):
        write_idx(out / name, arr)
    print(f"wrote {int((~test).sum())} train / {int(test.sum())} test images to {out}")


if __name__ == "__main__":
    main()
