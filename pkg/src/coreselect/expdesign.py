"""Closed-form experimental-design objectives and derivatives.

For linear-Gaussian data the bilevel summarization objective collapses to
trace formulas: frequentist A-design (sigma^2/2) Tr((X^T D(w) X)^{-1}),
frequentist V-design (sigma^2/2n) Tr(X (X^T D(w) X)^{-1} X^T) and the Bayesian
V-design G(w) = (1/2n) Tr(X (X^T D(w) X / sigma^2 + lambda I)^{-1} X^T), which
is convex and smooth in w with analytic gradient and Hessian. These bypass the
implicit-gradient engine entirely and double as a weld point for testing it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .errors import CoreselectError, SolverError

__all__ = [
    "ExpDesignProblem",
    "objective",
    "gradient",
    "hessian",
    "smoothness_bound",
    "limit_gap_estimate",
    "DesignObjective",
]

KINDS = ("A", "V", "BayesV")


@dataclass(frozen=True)
class ExpDesignProblem:
    """Design matrix + noise/prior scales defining a trace objective.

    prior_precision (lambda) must be 0 for the frequentist kinds A and V and
    positive for BayesV. F(w) = X^T D(w) X + lambda * sigma^2 * I.
    """

    X: np.ndarray
    noise_var: float
    prior_precision: float
    kind: str

    def __post_init__(self):
        x = np.asarray(self.X, dtype=np.float64)
        if x.ndim != 2:
            raise CoreselectError("X must be a matrix")
        object.__setattr__(self, "X", x)
        if self.noise_var <= 0:
            raise CoreselectError("noise_var (sigma^2) must be > 0")
        if self.kind not in KINDS:
            raise CoreselectError(f"kind must be one of {KINDS}")
        if self.kind == "BayesV" and self.prior_precision <= 0:
            raise CoreselectError("BayesV needs prior_precision > 0")
        if self.kind in ("A", "V") and self.prior_precision != 0:
            raise CoreselectError("frequentist kinds use prior_precision = 0")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


def _f_matrix(p: ExpDesignProblem, w: np.ndarray) -> np.ndarray:
    ridge = p.prior_precision * p.noise_var
    return p.X.T @ (w[:, None] * p.X) + ridge * np.eye(p.dim)


def _f_cholesky(p: ExpDesignProblem, w: np.ndarray):
    f = _f_matrix(p, w)
    try:
        return sla.cho_factor(f, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"F(w) is singular for kind {p.kind}: {exc}") from exc
    except sla.LinAlgError as exc:  # pragma: no cover
        raise SolverError(f"F(w) is singular for kind {p.kind}: {exc}") from exc


def objective(p: ExpDesignProblem, w) -> float:
    """Exact closed-form design objective at weights w >= 0."""
    w = np.asarray(w, dtype=np.float64)
    chol = _f_cholesky(p, w)
    if p.kind == "A":
        inv = sla.cho_solve(chol, np.eye(p.dim), check_finite=False)
        return 0.5 * p.noise_var * float(np.trace(inv))
    m = sla.cho_solve(chol, p.X.T, check_finite=False)  # F^{-1} X^T
    trace = float((p.X * m.T).sum())
    return 0.5 * p.noise_var / p.n * trace


def gradient(p: ExpDesignProblem, w) -> np.ndarray:
    """Analytic gradient; elementwise nonpositive (adding weight never hurts)."""
    w = np.asarray(w, dtype=np.float64)
    chol = _f_cholesky(p, w)
    m = sla.cho_solve(chol, p.X.T, check_finite=False)  # F^{-1} X^T, (d, n)
    if p.kind == "A":
        inv = sla.cho_solve(chol, np.eye(p.dim), check_finite=False)
        # d/dw_i Tr(F^{-1}) = -x_i^T F^{-2} x_i
        return -0.5 * p.noise_var * ((m.T @ inv) * m.T).sum(axis=1)
    proj = p.X @ m  # X F^{-1} X^T, symmetric (n, n)
    return -0.5 * p.noise_var / p.n * (proj * proj).sum(axis=0)


def hessian(p: ExpDesignProblem, w) -> np.ndarray:
    """Analytic Hessian of the BayesV objective: PSD by the Schur product
    theorem (Hadamard product of two PSD matrices)."""
    if p.kind != "BayesV":
        raise CoreselectError("hessian is available for BayesV only")
    w = np.asarray(w, dtype=np.float64)
    chol = _f_cholesky(p, w)
    m = sla.cho_solve(chol, p.X.T, check_finite=False)
    proj = p.X @ m  # X F^{-1} X^T
    return (p.noise_var / p.n) * proj * (proj @ proj)


def smoothness_bound(p: ExpDesignProblem) -> float:
    """Upper bound on the largest Hessian eigenvalue of the BayesV objective."""
    if p.kind != "BayesV":
        raise CoreselectError("smoothness_bound is for BayesV")
    row_norm = float(np.max(np.linalg.norm(p.X, axis=1)))
    lam = p.prior_precision
    s2 = p.noise_var
    return p.n * row_norm ** 6 / (lam ** 3 * s2 ** 2)


def limit_gap_estimate(p: ExpDesignProblem, S, n_grid, mc_samples: int,
                       seed: int):
    """Monte-Carlo estimates of g(theta_S) - g_V(theta_S) for growing n.

    Samples (theta, eps) from the Bayesian linear model, computes the ridge
    closed form on the fixed subset S and evaluates both outer objectives on
    the first n rows. Returns a list of (n, mean, standard_error). The gap
    approaches noise_var / 2 as n grows. Sampling is nested across the n grid
    (shared theta, prefix-shared eps), so estimates shrink smoothly.
    """
    if p.kind != "BayesV":
        raise CoreselectError("limit_gap_estimate assumes the Bayesian model")
    s_idx = np.asarray(sorted(int(i) for i in S), dtype=np.int64)
    if s_idx.size == 0:
        raise CoreselectError("S must be nonempty")
    n_grid = sorted(int(n) for n in n_grid)
    n_max = n_grid[-1]
    if n_max > p.n:
        raise CoreselectError("n_grid exceeds available rows")
    if s_idx.max() >= min(n_grid):
        raise CoreselectError("S must lie inside the smallest prefix")

    rng = np.random.default_rng(seed)
    d = p.dim
    sigma = float(np.sqrt(p.noise_var))
    lam = p.prior_precision
    xs = p.X[s_idx]
    ridge = lam * p.noise_var
    a = xs.T @ xs + ridge * np.eye(d)
    solve = np.linalg.solve

    thetas = rng.standard_normal((mc_samples, d)) / np.sqrt(lam)
    eps = sigma * rng.standard_normal((mc_samples, n_max))
    # theta_hat per sample: (X_S^T X_S + lam s2 I)^{-1} X_S^T y_S
    y_s = thetas @ xs.T + eps[:, s_idx]
    theta_hat = solve(a, xs.T @ y_s.T).T  # (mc, d)

    results = []
    for n in n_grid:
        xn = p.X[:n]
        pred_err = (thetas - theta_hat) @ xn.T  # X theta - X theta_hat
        # x^T theta_hat - y = -(pred_err + eps), squared below
        g_vals = 0.5 / n * ((pred_err + eps[:, :n]) ** 2).sum(axis=1)
        gv_vals = 0.5 / n * (pred_err ** 2).sum(axis=1)
        gaps = g_vals - gv_vals
        mean = float(gaps.mean())
        se = float(gaps.std(ddof=1) / np.sqrt(mc_samples)) if mc_samples > 1 else 0.0
        results.append((n, mean, se))
    return results


class DesignObjective:
    """Adapter exposing value/gradient so selection algorithms can run on the
    closed forms directly (no bilevel machinery)."""

    def __init__(self, problem: ExpDesignProblem):
        self.problem = problem
        self.n = problem.n

    def value(self, w) -> float:
        return objective(self.problem, w)

    def gradient(self, w, coords=None) -> np.ndarray:
        g = gradient(self.problem, w)
        if coords is None:
            return g
        return g[np.asarray(coords, dtype=np.int64)]

    def value_and_gradient(self, w, coords=None):
        return self.value(w), self.gradient(w, coords)
