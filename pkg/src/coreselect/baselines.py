"""Model-agnostic subset-selection baselines.

uniform sampling, k-means++ seeding with Lloyd refinement (returning the data
points nearest the final centers) and greedy k-center (farthest-point
traversal). All are deterministic given the seed and return distinct indices.
They can run in any representation: raw features, proxy features, or per-point
gradients exported from a model.
"""

from __future__ import annotations

import numpy as np

from .data import WeightedDataset
from .errors import CoreselectError

__all__ = ["uniform_select", "kmeanspp_select", "kcenter_select"]

_LLOYD_CAP = 100
_LLOYD_TOL = 1e-8


def _features(ds) -> np.ndarray:
    if isinstance(ds, WeightedDataset):
        return ds.features
    return np.asarray(ds, dtype=np.float64)


def uniform_select(ds, m: int, seed: int) -> list[int]:
    """m distinct indices uniformly without replacement."""
    x = _features(ds)
    if m > x.shape[0]:
        raise CoreselectError("m cannot exceed the dataset size")
    rng = np.random.default_rng(seed)
    return [int(i) for i in rng.choice(x.shape[0], size=m, replace=False)]


def _d2_seeding(x: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((m, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        total = d2.sum()
        if total <= 0:
            centers[j] = x[rng.integers(n)]
            continue
        centers[j] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeanspp_select(ds, m: int, seed: int) -> list[int]:
    """k-means++ seeding, Lloyd iterations to convergence, then the index of
    the unused point nearest each final center."""
    x = _features(ds)
    n = x.shape[0]
    if m > n:
        raise CoreselectError("m cannot exceed the dataset size")
    rng = np.random.default_rng(seed)
    centers = _d2_seeding(x, m, rng)
    for _ in range(_LLOYD_CAP):
        dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        new_centers = centers.copy()
        for j in range(m):
            members = x[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
        if np.linalg.norm(new_centers - centers) <= _LLOYD_TOL:
            centers = new_centers
            break
        centers = new_centers
    chosen: list[int] = []
    used = np.zeros(n, dtype=bool)
    for j in range(m):
        d = ((x - centers[j]) ** 2).sum(axis=1)
        d[used] = np.inf
        idx = int(np.argmin(d))
        chosen.append(idx)
        used[idx] = True
    return chosen


def kcenter_select(ds, m: int, seed: int) -> list[int]:
    """Greedy 2-approximate k-center: farthest-point traversal from a seeded
    random start."""
    x = _features(ds)
    n = x.shape[0]
    if m > n:
        raise CoreselectError("m cannot exceed the dataset size")
    rng = np.random.default_rng(seed)
    first = int(rng.integers(n))
    chosen = [first]
    d2 = ((x - x[first]) ** 2).sum(axis=1)
    for _ in range(1, m):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return chosen
