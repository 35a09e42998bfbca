"""Measurement (dictionary) selection for compressed sensing.

Selecting k rows of a measurement dictionary so that ridge (L2) recovery of a
representative signal set has small worst-case error. The inner recovery is a
closed-form quadratic per signal; the worst case is relaxed by log-sum-exp
with temperature tau, whose weight gradient is available in closed form via
implicit differentiation, so greedy batch-forward selection applies directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import CoreselectError

__all__ = [
    "CompressedSensingProblem",
    "recover_l2",
    "reconstruction_errors",
    "sup_error",
    "relaxed_sup",
    "DictionaryObjective",
    "dict_select",
    "approx_greedy_baseline",
    "random_gaussian_baseline",
    "make_sparse_signals",
]


@dataclass(frozen=True)
class CompressedSensingProblem:
    """Representative signals, candidate measurement rows and recovery setup.

    A measurement of signal x by atom a_j is the inner product a_j . x;
    recovery minimizes sum_j w_j (a_j . (x - y))^2 + reg * ||y||^2 over y.
    tau <= 0 requests the default temperature 0.05 * median signal energy.
    """

    signals: np.ndarray      # (n, d)
    dictionary: np.ndarray   # (m_dict, d)
    reg: float = 1e-3
    tau: float = 0.0

    def __post_init__(self):
        signals = np.asarray(self.signals, dtype=np.float64)
        atoms = np.asarray(self.dictionary, dtype=np.float64)
        if signals.ndim != 2 or atoms.ndim != 2:
            raise CoreselectError("signals and dictionary must be matrices")
        if signals.shape[1] != atoms.shape[1]:
            raise CoreselectError("signal and atom dimensions differ")
        if self.reg <= 0:
            raise CoreselectError("recovery regularizer must be > 0")
        norms = np.linalg.norm(atoms, axis=1)
        if (norms == 0).any():
            raise CoreselectError("dictionary rows must be nonzero")
        object.__setattr__(self, "signals", signals)
        object.__setattr__(self, "dictionary", atoms)
        if self.tau <= 0:
            energy = float(np.median((signals ** 2).sum(axis=1)))
            object.__setattr__(self, "tau", 0.05 * max(energy, 1e-12))

    @property
    def n_signals(self) -> int:
        return self.signals.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.dictionary.shape[0]

    @property
    def dim(self) -> int:
        return self.signals.shape[1]


def _recovery_matrix(p: CompressedSensingProblem, w: np.ndarray):
    a = p.dictionary
    m = a.T @ (w[:, None] * a) + p.reg * np.eye(p.dim)
    return sla.cho_factor(m, check_finite=False)


def _recover_all(p: CompressedSensingProblem, w: np.ndarray) -> np.ndarray:
    chol = _recovery_matrix(p, w)
    # rhs columns: A^T D(w) A x_i
    rhs = p.dictionary.T @ (w[:, None] * (p.dictionary @ p.signals.T))
    return sla.cho_solve(chol, rhs, check_finite=False).T


def recover_l2(p: CompressedSensingProblem, selected, x: np.ndarray) -> np.ndarray:
    """Closed-form L2 recovery of one signal from the selected measurements."""
    selected = np.asarray(sorted(set(int(j) for j in selected)), dtype=np.int64)
    if selected.size == 0:
        raise CoreselectError("selected measurement set must be nonempty")
    w = np.zeros(p.n_atoms)
    w[selected] = 1.0
    chol = _recovery_matrix(p, w)
    rhs = p.dictionary.T @ (w * (p.dictionary @ np.asarray(x, dtype=np.float64)))
    return sla.cho_solve(chol, rhs, check_finite=False)


def reconstruction_errors(p: CompressedSensingProblem, w: np.ndarray) -> np.ndarray:
    """||x_i - x_hat_i(w)||^2 for every signal."""
    recovered = _recover_all(p, np.asarray(w, dtype=np.float64))
    return ((p.signals - recovered) ** 2).sum(axis=1)


def sup_error(p: CompressedSensingProblem, selected) -> float:
    w = np.zeros(p.n_atoms)
    w[np.asarray(list(selected), dtype=np.int64)] = 1.0
    return float(reconstruction_errors(p, w).max())


def relaxed_sup(errors: np.ndarray, tau: float) -> float:
    """tau * log sum exp(e_i / tau): between max(e) and max(e) + tau*log(n)."""
    scaled = errors / tau
    peak = scaled.max()
    return float(tau * (peak + math.log(np.exp(scaled - peak).sum())))


class DictionaryObjective:
    """Relaxed worst-case recovery error as a weight objective over atoms."""

    def __init__(self, p: CompressedSensingProblem):
        self.p = p
        self.n = p.n_atoms

    def value(self, w) -> float:
        return relaxed_sup(reconstruction_errors(self.p, np.asarray(w, float)),
                           self.p.tau)

    def gradient(self, w, coords=None) -> np.ndarray:
        p = self.p
        w = np.asarray(w, dtype=np.float64)
        chol = _recovery_matrix(p, w)
        recovered = _recover_all(p, w)
        resid = p.signals - recovered  # (n, d)
        errors = (resid ** 2).sum(axis=1)
        scaled = errors / p.tau
        soft = np.exp(scaled - scaled.max())
        soft /= soft.sum()
        # de_i/dw_j = -2 (r_i^T M^{-1} a_j)(a_j^T r_i)
        minv_at = sla.cho_solve(chol, p.dictionary.T, check_finite=False)
        term1 = resid @ minv_at          # (n, m_dict)
        term2 = resid @ p.dictionary.T   # (n, m_dict)
        grad = -2.0 * (soft[:, None] * term1 * term2).sum(axis=0)
        if coords is None:
            return grad
        return grad[np.asarray(coords, dtype=np.int64)]

    def value_and_gradient(self, w, coords=None):
        return self.value(w), self.gradient(w, coords)


def dict_select(p: CompressedSensingProblem, k: int,
                batch: int = 1, seed: int = 0) -> list[int]:
    """Greedy batch-forward selection of k atoms by the relaxed-sup implicit
    gradient; weights stay binary. Starts empty (the regularizer keeps the
    recovery well-posed), so no random initial pool is needed.
    """
    if k > p.n_atoms:
        raise CoreselectError("k cannot exceed the dictionary size")
    obj = DictionaryObjective(p)
    w = np.zeros(p.n_atoms)
    selected: list[int] = []
    while len(selected) < k:
        grad = obj.gradient(w)
        grad[selected] = np.inf
        take = min(batch, k - len(selected))
        order = np.argsort(grad, kind="stable")[:take]
        for j in order:
            selected.append(int(j))
            w[j] = 1.0
    return selected


def approx_greedy_baseline(p: CompressedSensingProblem, k: int) -> list[int]:
    """Top-k atoms by mean absolute inner product with the signals."""
    if k > p.n_atoms:
        raise CoreselectError("k cannot exceed the dictionary size")
    scores = np.abs(p.signals @ p.dictionary.T).mean(axis=0)
    order = np.argsort(-scores, kind="stable")[:k]
    return [int(j) for j in order]


def random_gaussian_baseline(d: int, k: int, seed: int) -> np.ndarray:
    """k random measurement rows with iid standard normal entries, scaled to
    unit norm."""
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((k, d))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_sparse_signals(n: int, d: int, sparsity: int, seed: int,
                        support_pool: int | None = None) -> np.ndarray:
    """n signals with `sparsity` nonzero N(0,1) coords drawn from the first
    support_pool coordinates (all d by default)."""
    rng = np.random.default_rng(seed)
    pool = d if support_pool is None else support_pool
    out = np.zeros((n, d))
    for i in range(n):
        support = rng.choice(pool, size=sparsity, replace=False)
        out[i, support] = rng.standard_normal(sparsity)
    return out
