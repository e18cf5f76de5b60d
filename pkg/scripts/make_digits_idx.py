"""Write the scikit-learn 8x8 digits as IDX train/test files.

    python3 scripts/make_digits_idx.py --out data/digits
"""

import argparse
from pathlib import Path

import numpy as np
from sklearn.datasets import load_digits

from etag.data_io import write_idx_images, write_idx_labels


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/digits")
    ap.add_argument("--test-fraction", type=float, default=0.2)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    digits = load_digits()
    images = (digits.images / 16.0).astype(np.float64)  # pixel values are 0..16
    labels = digits.target
    rng = np.random.default_rng(args.seed)
    test = np.zeros(len(labels), dtype=bool)
    for c in np.unique(labels):  # stratified split
        idx = rng.permutation(np.flatnonzero(labels == c))
        test[idx[: int(round(args.test_fraction * len(idx)))]] = True

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_idx_images(out / "train-images-idx3-ubyte", images[~test])
    write_idx_labels(out / "train-labels-idx1-ubyte", labels[~test])
    write_idx_images(out / "t10k-images-idx3-ubyte", images[test])
    write_idx_labels(out / "t10k-labels-idx1-ubyte", labels[test])
    print(f"{(~test).sum()} train / {test.sum()} test digits written to {out}")


if __name__ == "__main__":
    main()
