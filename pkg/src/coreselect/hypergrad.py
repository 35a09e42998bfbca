"""The implicit-gradient engine.

Computes gradients of an outer objective g(theta*(w)) with respect to the data
weights w through the stationarity of the inner problem: one inverse
Hessian-vector product in parameter space followed by inner products with the
per-point gradients. Inverse HVPs come from conjugate gradients or a truncated
Neumann series. An influence-function probe and a brute-force finite-difference
oracle are included as independent cross-checks.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import linalg, models
from .errors import CoreselectError, NeumannDivergenceError

logger = logging.getLogger(__name__)

__all__ = [
    "HypergradConfig",
    "SelectionScores",
    "cg_solve",
    "cg_solve_info",
    "neumann_inverse_hvp",
    "inverse_hvp",
    "implicit_gradient",
    "selection_scores",
    "influence",
    "finite_diff_hypergradient",
]


@dataclass(frozen=True)
class HypergradConfig:
    """Solver settings for inverse Hessian-vector products.

    damping is added to the Hessian diagonal (useful when the inner Hessian is
    only positive semi-definite, e.g. mixture models at an EM fixed point).
    identity_hessian is a test hook replacing H^{-1} with the identity, the
    damping -> infinity limit up to scale.
    """

    solver: str = "cg"
    max_iters: int = 100
    cg_tolerance: float = 1e-10
    neumann_terms: int = 100
    neumann_scale: float = 1.0
    damping: float = 0.0
    identity_hessian: bool = False

    def __post_init__(self):
        if self.solver not in ("cg", "neumann"):
            raise CoreselectError(f"unknown solver {self.solver!r}")
        if self.max_iters < 1:
            raise CoreselectError("max_iters must be >= 1")
        if self.solver == "neumann" and self.neumann_scale <= 0:
            raise CoreselectError("neumann_scale must be > 0")
        if self.damping < 0:
            raise CoreselectError("damping must be >= 0")


@dataclass(frozen=True)
class SelectionScores:
    """Per-candidate selection scores; score[k] = -e_k^T grad_w G at w."""

    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        if not np.isfinite(scores).all():
            raise CoreselectError("selection scores contain non-finite entries")
        object.__setattr__(self, "scores", scores)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("index,score\n")
            for i, s in enumerate(self.scores):
                fh.write(f"{i},{format(float(s), '.17g')}\n")


def cg_solve(apply_h, rhs: np.ndarray, cfg: HypergradConfig) -> np.ndarray:
    """Solve H x = rhs by conjugate gradients; warn when max_iters is hit."""
    x, _, converged = cg_solve_info(apply_h, rhs, cfg)
    if not converged:
        logger.warning("CG hit max_iters=%d without reaching tolerance %.1e",
                       cfg.max_iters, cfg.cg_tolerance)
    return x


def cg_solve_info(apply_h, rhs: np.ndarray, cfg: HypergradConfig):
    """cg_solve returning (x, residual_norms, converged)."""
    return linalg.cg(apply_h, rhs, tol=cfg.cg_tolerance, max_iters=cfg.max_iters)


def neumann_inverse_hvp(apply_h, rhs: np.ndarray, cfg: HypergradConfig) -> np.ndarray:
    """Approximate H^{-1} rhs by alpha * sum_{i=0}^{T} (I - alpha H)^i rhs.

    Detects divergence: partial-sum norm growing more than 10x over any 10
    consecutive terms aborts with advice to shrink alpha.
    """
    alpha = cfg.neumann_scale
    term = np.asarray(rhs, dtype=np.float64).copy()
    acc = term.copy()
    norms = [float(np.linalg.norm(acc))]
    for _ in range(cfg.neumann_terms):
        term = term - alpha * apply_h(term)
        acc = acc + term
        norms.append(float(np.linalg.norm(acc)))
        if not np.isfinite(norms[-1]):
            raise NeumannDivergenceError(
                "Neumann series overflowed; decrease neumann_scale (alpha)")
        if len(norms) > 10 and norms[-1] > 10.0 * max(norms[-11], 1e-300):
            raise NeumannDivergenceError(
                "Neumann partial sums grew >10x over 10 terms; decrease "
                "neumann_scale (alpha)")
    return alpha * acc


def inverse_hvp(apply_h, rhs: np.ndarray, cfg: HypergradConfig) -> np.ndarray:
    """Dispatch on cfg.solver, composing damping into the operator."""
    if cfg.identity_hessian:
        return np.asarray(rhs, dtype=np.float64).copy()
    if cfg.damping > 0:
        base = apply_h
        apply_h = lambda v: base(v) + cfg.damping * v  # noqa: E731
    if cfg.solver == "cg":
        return cg_solve(apply_h, rhs, cfg)
    return neumann_inverse_hvp(apply_h, rhs, cfg)


def _inner_inverse_outer_grad(inner: models.InnerProblem,
                              outer: models.OuterObjective,
                              w: np.ndarray, theta_star,
                              cfg: HypergradConfig) -> np.ndarray:
    rhs = models.outer_grad(outer, theta_star)
    return inverse_hvp(lambda v: models.hvp(inner, theta_star, w, v), rhs, cfg)


def implicit_gradient(inner: models.InnerProblem, outer: models.OuterObjective,
                      w, theta_star, cfg: HypergradConfig,
                      coords=None) -> np.ndarray:
    """Gradient of G(w) = g(theta*(w)) with respect to w.

    theta_star must satisfy inner stationarity to the solver tolerance. For
    these objectives dg/dw is structurally zero (g touches w only through
    theta*), so the result is -(dg/dtheta) H^{-1} (d^2 f / dtheta dw), one
    inverse-HVP followed by per-point inner products. `coords` restricts the
    returned coordinates (all of them by default).
    """
    w = np.asarray(w, dtype=np.float64)
    x = _inner_inverse_outer_grad(inner, outer, w, theta_star, cfg)
    grads = models.per_point_grads(inner, theta_star, coords)
    return -(grads @ x)


def selection_scores(inner: models.InnerProblem, outer: models.OuterObjective,
                     w, theta_star, cfg: HypergradConfig) -> SelectionScores:
    """score[k] = grad l_k(theta*)^T H^{-1} grad g(theta*) for every candidate.

    Equals the negated implicit-gradient coordinate; a single inverse-HVP is
    shared across all candidates.
    """
    return SelectionScores(-implicit_gradient(inner, outer, w, theta_star, cfg))


def influence(inner: models.InnerProblem, outer: models.OuterObjective,
              w_s, k: int, epsilon_fd: float = 1e-4,
              budget: models.SolveBudget | None = None) -> float:
    """Empirical influence of upweighting point k on the outer loss.

    Estimates -d g(theta*) / d eps at eps=0 by re-solving the inner problem at
    eps = +/- epsilon_fd and central-differencing; an independent oracle for
    selection_scores. Inner tolerance is tightened 100x during the probes.
    """
    w_s = np.asarray(w_s, dtype=np.float64)
    base_budget = budget or models.SolveBudget()
    tight = models.SolveBudget(base_budget.max_iters,
                               base_budget.tol * 1e-2)
    warm = models.solve_inner(inner, w_s, budget=tight)
    values = []
    for sign in (+1.0, -1.0):
        w_probe = w_s.copy()
        w_probe[k] += sign * epsilon_fd
        params = models.solve_inner(inner, w_probe, warm_start=warm, budget=tight)
        values.append(models.outer_loss(outer, params))
    return -(values[0] - values[1]) / (2.0 * epsilon_fd)


def finite_diff_hypergradient(inner: models.InnerProblem,
                              outer: models.OuterObjective, w,
                              h: float = 1e-5,
                              budget: models.SolveBudget | None = None) -> np.ndarray:
    """Central differences of w -> g(theta*(w)) with a full inner re-solve per
    probe; one-sided at coordinates where w_i - h would go negative. O(n)
    solves, test-scale only.
    """
    w = np.asarray(w, dtype=np.float64)
    base_budget = budget or models.SolveBudget()
    tight = models.SolveBudget(base_budget.max_iters, base_budget.tol * 1e-2)
    warm = models.solve_inner(inner, w, budget=tight)
    base_value = models.outer_loss(outer, warm)
    out = np.zeros_like(w)
    for i in range(len(w)):
        w_plus = w.copy()
        w_plus[i] += h
        g_plus = models.outer_loss(
            outer, models.solve_inner(inner, w_plus, warm_start=warm, budget=tight))
        if w[i] - h >= 0:
            w_minus = w.copy()
            w_minus[i] -= h
            g_minus = models.outer_loss(
                outer, models.solve_inner(inner, w_minus, warm_start=warm,
                                          budget=tight))
            out[i] = (g_plus - g_minus) / (2.0 * h)
        else:
            out[i] = (g_plus - base_value) / h
    return out
