"""Dataset representation, file ingestion, standardization and synthetic generators.

All randomness is derived from explicit 64-bit integer seeds; generators are
pure functions of their arguments.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np

from .errors import CoreselectError, ParseError

__all__ = [
    "WeightedDataset",
    "StreamBatch",
    "ColumnStats",
    "parse_libsvm",
    "standardize",
    "make_gmm_synthetic",
    "make_binary_blobs",
    "make_imbalanced_stream",
    "concat_datasets",
    "export_csv",
]


@dataclass(frozen=True)
class WeightedDataset:
    """A dense feature matrix with optional labels and nonnegative per-point weights.

    Points with weight 0 are "not in the coreset"; weights initialized to 1 mean
    the full data set. Labels are integers for classification, floats for
    regression targets, or a (n, c) float matrix of soft class probabilities.
    """

    features: np.ndarray
    labels: np.ndarray | None = None
    weights: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise CoreselectError("features must be a 2-D matrix")
        if not np.isfinite(feats).all():
            raise CoreselectError("features contain NaN/Inf entries")
        object.__setattr__(self, "features", feats)
        n = feats.shape[0]
        if self.weights is None:
            object.__setattr__(self, "weights", np.ones(n))
        else:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (n,):
                raise CoreselectError(f"weights must have shape ({n},), got {w.shape}")
            if not np.isfinite(w).all() or (w < 0).any():
                raise CoreselectError("weights must be finite and nonnegative")
            object.__setattr__(self, "weights", w)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape[0] != n:
                raise CoreselectError("labels length must equal the number of rows")
            if np.issubdtype(labels.dtype, np.integer):
                labels = labels.astype(np.int64)
            else:
                labels = labels.astype(np.float64)
                if not np.isfinite(labels).all():
                    raise CoreselectError("labels contain NaN/Inf entries")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def label_kind(self) -> str:
        """One of 'none', 'class', 'real', 'soft'."""
        if self.labels is None:
            return "none"
        if self.labels.ndim == 2:
            return "soft"
        if np.issubdtype(self.labels.dtype, np.integer):
            return "class"
        return "real"

    def subset(self, indices) -> "WeightedDataset":
        idx = np.asarray(indices, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return WeightedDataset(self.features[idx], labels, self.weights[idx])

    def with_weights(self, weights) -> "WeightedDataset":
        return WeightedDataset(self.features, self.labels, weights)


@dataclass(frozen=True)
class StreamBatch:
    """One element of an ordered data stream."""

    dataset: WeightedDataset
    sequence_index: int

    def __post_init__(self):
        if self.sequence_index < 0:
            raise CoreselectError("sequence_index must be nonnegative")


def parse_libsvm(text, dim_hint: int | None = None) -> WeightedDataset:
    """Parse LIBSVM sparse text format into a dense dataset.

    Each line is ``<label> <index>:<value> ...`` with 1-based feature indices;
    unspecified entries are 0 and weights are initialized to 1. Integral labels
    are remapped to contiguous class ids 0..c-1 (so {-1,+1} and {0,1} both
    become {0,1}); any non-integral label switches the whole file to regression
    targets.

    Raises ParseError with the offending 1-based line number on malformed input.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    elif isinstance(text, io.IOBase):
        text = text.read()
        if isinstance(text, bytes):
            text = text.decode("utf-8")

    raw_labels: list[float] = []
    rows: list[list[tuple[int, float]]] = []
    max_index = 0
    for line_no, line in enumerate(text.splitlines(), start=1):
        tokens = line.split()
        if not tokens:
            continue
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(line_no, f"invalid label token {tokens[0]!r}") from None
        pairs = []
        for token in tokens[1:]:
            head, sep, tail = token.partition(":")
            if not sep:
                raise ParseError(line_no, f"expected index:value, got {token!r}")
            try:
                index = int(head)
                value = float(tail)
            except ValueError:
                raise ParseError(line_no, f"invalid index:value pair {token!r}") from None
            if index < 1:
                raise ParseError(line_no, f"feature indices are 1-based, got {index}")
            if dim_hint is not None and index > dim_hint:
                raise ParseError(line_no, f"index {index} exceeds dim_hint {dim_hint}")
            if not np.isfinite(value):
                raise ParseError(line_no, f"non-finite feature value in {token!r}")
            pairs.append((index, value))
            max_index = max(max_index, index)
        raw_labels.append(label)
        rows.append(pairs)

    dim = dim_hint if dim_hint is not None else max_index
    features = np.zeros((len(rows), dim))
    for i, pairs in enumerate(rows):
        for index, value in pairs:
            features[i, index - 1] = value

    labels_arr = np.asarray(raw_labels)
    if labels_arr.size and np.all(labels_arr == np.round(labels_arr)):
        ints = labels_arr.astype(np.int64)
        values = set(np.unique(ints).tolist())
        if values <= {-1, 1} or values <= {0, 1}:
            labels: np.ndarray = np.where(ints > 0, ints, 0).astype(np.int64)
        else:
            remap = {c: i for i, c in enumerate(sorted(values))}
            labels = np.asarray([remap[v] for v in ints.tolist()], dtype=np.int64)
    else:
        labels = labels_arr.astype(np.float64)
    return WeightedDataset(features, labels)


@dataclass(frozen=True)
class ColumnStats:
    """Per-column mean/stdev captured by standardize, reusable on held-out data."""

    mean: np.ndarray
    std: np.ndarray  # population stdev; 0 marks a constant column

    def apply(self, features: np.ndarray) -> np.ndarray:
        feats = np.asarray(features, dtype=np.float64)
        safe = np.where(self.std > 0, self.std, 1.0)
        out = (feats - self.mean) / safe
        out[:, self.std == 0] = 0.0
        return out

    def apply_dataset(self, ds: WeightedDataset) -> WeightedDataset:
        return WeightedDataset(self.apply(ds.features), ds.labels, ds.weights)


def standardize(ds: WeightedDataset) -> tuple[WeightedDataset, ColumnStats]:
    """Shift/scale each column to mean 0 and population stdev 1.

    Constant columns map to all-zeros instead of raising. Requires n >= 2.
    """
    if ds.n < 2:
        raise CoreselectError("standardize requires at least 2 rows")
    mean = ds.features.mean(axis=0)
    std = ds.features.std(axis=0)  # population (ddof=0)
    stats = ColumnStats(mean=mean, std=std)
    return stats.apply_dataset(ds), stats


def _mixture_weights(k: int) -> np.ndarray:
    # Geometric decay clipped at 5%: imbalanced but every component is
    # guaranteed a nontrivial share.
    w = 0.6 ** np.arange(k)
    w = np.maximum(w / w.sum(), 0.05)
    return w / w.sum()


def make_gmm_synthetic(k: int, n: int, seed: int) -> WeightedDataset:
    """2-D Gaussian mixture sample with k components.

    Component means sit on a circle of radius 4, covariances are the identity,
    and mixture weights decay geometrically (clipped at 5%). Labels record the
    generating component. Deterministic for a fixed seed.
    """
    if k < 1:
        raise CoreselectError("k must be >= 1")
    if n < k:
        raise CoreselectError("n must be >= k")
    rng = np.random.default_rng(seed)
    if k == 1:
        means = np.zeros((1, 2))
    else:
        angles = 2 * np.pi * np.arange(k) / k
        means = 4.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    mix = _mixture_weights(k)
    # Guarantee >= 1 point per component, fill the rest multinomially.
    counts = np.ones(k, dtype=np.int64)
    counts += rng.multinomial(n - k, mix)
    features = np.empty((n, 2))
    labels = np.empty(n, dtype=np.int64)
    pos = 0
    for j in range(k):
        c = counts[j]
        features[pos : pos + c] = means[j] + rng.standard_normal((c, 2))
        labels[pos : pos + c] = j
        pos += c
    perm = rng.permutation(n)
    return WeightedDataset(features[perm], labels[perm])


def make_binary_blobs(n: int, dim: int, seed: int, class1_fraction: float = 0.5,
                      separation: float = 2.0) -> WeightedDataset:
    """Two-class Gaussian blobs separated along a random direction.

    Used for building desk-scale binary classification instances (including the
    bundled LIBSVM-format file regenerated by scripts/make_bundled_dataset.py).
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    n1 = int(round(n * class1_fraction))
    n0 = n - n1
    x0 = rng.standard_normal((n0, dim)) - 0.5 * separation * direction
    x1 = rng.standard_normal((n1, dim)) + 0.5 * separation * direction
    features = np.vstack([x0, x1])
    labels = np.concatenate([np.zeros(n0, dtype=np.int64), np.ones(n1, dtype=np.int64)])
    perm = rng.permutation(n)
    return WeightedDataset(features[perm], labels[perm])


def concat_datasets(parts: list[WeightedDataset]) -> WeightedDataset:
    """Row-concatenate datasets; labels must be jointly present or jointly absent."""
    if not parts:
        raise CoreselectError("cannot concatenate an empty list of datasets")
    features = np.vstack([p.features for p in parts])
    weights = np.concatenate([p.weights for p in parts])
    kinds = {p.label_kind for p in parts}
    if kinds == {"none"}:
        labels = None
    elif "none" in kinds:
        raise CoreselectError("cannot concatenate labeled with unlabeled datasets")
    else:
        labels = np.concatenate([p.labels for p in parts])
    return WeightedDataset(features, labels, weights)


def make_imbalanced_stream(datasets: list[WeightedDataset], keep_counts: list[int],
                           batch_size: int, seed: int) -> list[StreamBatch]:
    """Subsample each task, concatenate in order and slice into batches.

    The last batch may be short. keep_counts[t] points are drawn uniformly
    without replacement from task t (original order preserved within a task).
    """
    if not datasets:
        raise CoreselectError("task list must be nonempty")
    if len(keep_counts) != len(datasets):
        raise CoreselectError("keep_counts must match the number of tasks")
    if batch_size < 1:
        raise CoreselectError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    kept = []
    for t, (ds, count) in enumerate(zip(datasets, keep_counts)):
        if count > ds.n:
            raise CoreselectError(f"keep_counts[{t}]={count} exceeds task size {ds.n}")
        idx = np.sort(rng.choice(ds.n, size=count, replace=False))
        kept.append(ds.subset(idx))
    whole = concat_datasets(kept)
    batches = []
    for seq, start in enumerate(range(0, whole.n, batch_size)):
        idx = np.arange(start, min(start + batch_size, whole.n))
        batches.append(StreamBatch(whole.subset(idx), seq))
    return batches


def export_csv(ds: WeightedDataset, path) -> None:
    """Write the dataset as CSV: header row, one point per line.

    Columns are x0..x{d-1}, label (empty when absent; c columns y0..y{c-1} for
    soft labels) and weight.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        feat_cols = [f"x{j}" for j in range(ds.dim)]
        if ds.label_kind == "soft":
            label_cols = [f"y{j}" for j in range(ds.labels.shape[1])]
        else:
            label_cols = ["label"]
        writer.writerow(feat_cols + label_cols + ["weight"])
        for i in range(ds.n):
            row = [_fmt(v) for v in ds.features[i]]
            if ds.label_kind == "none":
                row.append("")
            elif ds.label_kind == "class":
                row.append(str(int(ds.labels[i])))
            elif ds.label_kind == "soft":
                row.extend(_fmt(v) for v in ds.labels[i])
            else:
                row.append(_fmt(ds.labels[i]))
            row.append(_fmt(ds.weights[i]))
            writer.writerow(row)


def _fmt(value: float) -> str:
    return format(float(value), ".17g")
