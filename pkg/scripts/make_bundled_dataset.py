"""Regenerate the bundled LIBSVM-format binary classification dataset.

Two overlapping Gaussian classes (70/30 split) in 10 dimensions, 6250 points:
5000 are used for training and 1250 for testing by the benchmark configs. The
file is committed, so this script only needs to run when the recipe changes.

Usage: python3 scripts/make_bundled_dataset.py [out_path]
"""

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from coreselect.data import make_binary_blobs  # noqa: E402

N = 6250
DIM = 10
SEED = 20240817
SEPARATION = 3.6
CLASS1_FRACTION = 0.3


def main() -> None:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else (
        Path(__file__).resolve().parent.parent / "data"
        / "binary_blobs_n6250_d10.libsvm")
    out.parent.mkdir(parents=True, exist_ok=True)
    ds = make_binary_blobs(N, DIM, SEED, CLASS1_FRACTION, SEPARATION)
    lines = []
    for i in range(ds.n):
        label = "+1" if ds.labels[i] == 1 else "-1"
        feats = " ".join(f"{j + 1}:{ds.features[i, j]:.6g}"
                         for j in range(ds.dim))
        lines.append(f"{label} {feats}")
    out.write_text("\n".join(lines) + "\n")
    print(f"wrote {out} ({ds.n} rows, dim {ds.dim})")


if __name__ == "__main__":
    main()
