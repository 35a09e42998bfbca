"""Kernel proxies: Gram matrices, Nystrom feature maps and proxy problems.

A cheap surrogate model for selection: approximate the kernel machine on a
q-dimensional Nystrom feature space, run all selection machinery there
unchanged. Landmarks are sampled uniformly; externally computed Gram matrices
(e.g. from kernels this library does not implement) can be ingested from a
binary file and used the same way.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import WeightedDataset
from .errors import CoreselectError, DegenerateKernelError
from .models import InnerProblem

__all__ = [
    "KernelSpec",
    "NystromMap",
    "kernel_matrix",
    "nystrom_fit",
    "nystrom_features_from_gram",
    "proxy_problem",
    "write_gram",
    "read_gram",
]

GRAM_MAGIC = b"CSGRAM01"


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and hyperparameters.

    rbf: k(x,y) = exp(-gamma ||x-y||^2); linear: x.y; polynomial:
    (x.y + coef0)^degree.
    """

    family: str = "rbf"
    gamma: float = 1e-3
    degree: int = 2
    coef0: float = 1.0

    def __post_init__(self):
        if self.family not in ("rbf", "linear", "polynomial"):
            raise CoreselectError(f"unknown kernel family {self.family!r}")
        if self.family == "rbf" and self.gamma <= 0:
            raise CoreselectError("rbf needs gamma > 0")
        if self.family == "polynomial" and self.degree < 1:
            raise CoreselectError("polynomial needs degree >= 1")


def kernel_matrix(a: np.ndarray, b: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """K[i, j] = k(a_i, b_j); symmetric PSD when a is b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise CoreselectError("incompatible feature dimensions")
    if spec.family == "linear":
        return a @ b.T
    if spec.family == "polynomial":
        return (a @ b.T + spec.coef0) ** spec.degree
    sq = (a * a).sum(axis=1)[:, None] + (b * b).sum(axis=1)[None, :] - 2.0 * a @ b.T
    return np.exp(-spec.gamma * np.maximum(sq, 0.0))


@dataclass(frozen=True)
class NystromMap:
    """Feature map z(x) = D^{-1/2} U^T [k(x, x_i), i in landmarks].

    Eigenpairs of the landmark Gram below eig_floor are dropped, so the
    effective feature dimension may be smaller than the landmark count.
    """

    landmarks: np.ndarray          # indices into the fitted dataset
    landmark_points: np.ndarray    # (q, d) rows, kept for out-of-sample maps
    transform: np.ndarray          # (r, q) = D^{-1/2} U^T on retained pairs
    kernel: KernelSpec
    eig_floor: float

    @property
    def feature_dim(self) -> int:
        return self.transform.shape[0]

    def transform_points(self, features: np.ndarray) -> np.ndarray:
        k = kernel_matrix(np.asarray(features, dtype=np.float64),
                          self.landmark_points, self.kernel)
        return k @ self.transform.T

    def transform_dataset(self, ds: WeightedDataset) -> WeightedDataset:
        return WeightedDataset(self.transform_points(ds.features), ds.labels,
                               ds.weights)


def _eig_transform(k_qq: np.ndarray, eig_floor: float) -> np.ndarray:
    vals, vecs = np.linalg.eigh(k_qq)
    keep = vals > eig_floor
    if not keep.any():
        raise DegenerateKernelError(
            f"all {len(vals)} landmark eigenvalues are <= {eig_floor:g}")
    vals = vals[keep]
    vecs = vecs[:, keep]
    return (vecs / np.sqrt(vals)).T  # rows orthonormal under retained spectrum


def nystrom_fit(ds: WeightedDataset, q: int, spec: KernelSpec, seed: int,
                eig_floor: float = 1e-10) -> NystromMap:
    """Uniformly sample q landmarks without replacement and eigendecompose."""
    if q > ds.n:
        raise CoreselectError("q cannot exceed the dataset size")
    rng = np.random.default_rng(seed)
    landmarks = np.sort(rng.choice(ds.n, size=q, replace=False))
    points = ds.features[landmarks]
    transform = _eig_transform(kernel_matrix(points, points, spec), eig_floor)
    return NystromMap(landmarks, points, transform, spec, eig_floor)


def nystrom_features_from_gram(gram: np.ndarray, q: int, seed: int,
                               eig_floor: float = 1e-10):
    """Nystrom features for the n points of a precomputed Gram matrix.

    Returns (features (n, r), landmark indices). Out-of-sample points are not
    supported on this path since the kernel function is unavailable.
    """
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    if gram.shape != (n, n):
        raise CoreselectError("gram must be square")
    if q > n:
        raise CoreselectError("q cannot exceed the number of points")
    rng = np.random.default_rng(seed)
    landmarks = np.sort(rng.choice(n, size=q, replace=False))
    transform = _eig_transform(gram[np.ix_(landmarks, landmarks)], eig_floor)
    return gram[:, landmarks] @ transform.T, landmarks


def proxy_problem(ds: WeightedDataset, nmap: NystromMap, family: str,
                  l2_reg: float, n_classes: int | None = None,
                  n_components: int | None = None) -> InnerProblem:
    """Inner problem over the Nystrom-transformed features.

    All selection machinery applies unchanged; the map is kept on the problem
    so test points can be transformed consistently.
    """
    transformed = nmap.transform_dataset(ds)
    return InnerProblem(transformed, family, l2_reg, n_classes, n_components,
                        feature_map=nmap)


def write_gram(path, gram: np.ndarray) -> None:
    """Binary Gram file: 16-byte header (8-byte magic + uint64 n, little
    endian), then n*n float64 little-endian row-major."""
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    if gram.shape != (n, n):
        raise CoreselectError("gram must be square")
    with open(path, "wb") as fh:
        fh.write(GRAM_MAGIC)
        fh.write(struct.pack("<Q", n))
        fh.write(gram.astype("<f8").tobytes(order="C"))


def read_gram(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != GRAM_MAGIC:
            raise CoreselectError(f"bad gram file magic {magic!r}")
        (n,) = struct.unpack("<Q", fh.read(8))
        payload = fh.read()
    expected = n * n * 8
    if len(payload) != expected:
        raise CoreselectError(
            f"gram payload has {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(n, n).copy()
