"""Weighted empirical-risk inner problems and their derivative oracles.

The inner objective throughout is f(theta, w) = sum_i w_i * l_i(theta)
+ l2_reg * ||theta||^2. Solvers return exact closed forms where available
(ridge) and damped Newton otherwise; the Hessian-vector products are analytic
and never materialize the full Hessian above 512 parameters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .data import WeightedDataset
from .errors import CoreselectError, SolverError

__all__ = [
    "FAMILIES",
    "ModelParams",
    "InnerProblem",
    "OuterObjective",
    "SolveBudget",
    "solve_inner",
    "loss",
    "per_point_grads",
    "grad_weighted",
    "hvp",
    "outer_loss",
    "outer_grad",
    "predict_proba",
    "predict",
    "init_params",
    "params_to_json",
    "params_from_json",
    "gmm_em_fit",
    "gmm_nll",
]

FAMILIES = ("ridge", "binary-logistic", "multiclass-logistic", "gmm-nll")

# Above this parameter count Newton switches to a Hessian-free CG inner solve.
_DENSE_NEWTON_LIMIT = 512


@dataclass(frozen=True)
class ModelParams:
    """Flat parameter vector plus the metadata needed to interpret it."""

    theta: np.ndarray
    family: str
    shape: tuple
    converged: bool = True
    diagnostic: str = ""

    def __post_init__(self):
        theta = np.asarray(self.theta, dtype=np.float64).ravel()
        if not np.isfinite(theta).all():
            raise CoreselectError("model parameters must be finite")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "shape", tuple(self.shape))


@dataclass(frozen=True)
class SolveBudget:
    max_iters: int = 10_000
    tol: float = 1e-8


@dataclass(frozen=True)
class InnerProblem:
    """A weighted ERM problem over a fixed dataset and loss family."""

    dataset: WeightedDataset
    family: str
    l2_reg: float = 0.0
    n_classes: int | None = None
    n_components: int | None = None
    feature_map: object | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CoreselectError(f"unknown loss family {self.family!r}")
        if self.l2_reg < 0:
            raise CoreselectError("l2_reg must be >= 0")
        if self.family == "multiclass-logistic":
            if self.n_classes is None:
                inferred = _infer_classes(self.dataset)
                object.__setattr__(self, "n_classes", inferred)
            if self.n_classes < 2:
                raise CoreselectError("multiclass-logistic needs n_classes >= 2")
        if self.family == "gmm-nll":
            if self.n_components is None or self.n_components < 1:
                raise CoreselectError("gmm-nll needs n_components >= 1")
        if self.family in ("ridge", "binary-logistic") and self.dataset.labels is None:
            raise CoreselectError(f"{self.family} requires labels")

    @property
    def param_shape(self) -> tuple:
        d = self.dataset.dim
        if self.family == "ridge" or self.family == "binary-logistic":
            return (d,)
        if self.family == "multiclass-logistic":
            return (d, self.n_classes)
        k = self.n_components
        return (k, d)

    @property
    def param_dim(self) -> int:
        if self.family == "gmm-nll":
            k, d = self.param_shape
            return k + k * d + k * (d * (d + 1) // 2)
        return int(np.prod(self.param_shape))


@dataclass(frozen=True)
class OuterObjective:
    """Unweighted (or optionally scaled) sum of losses over an evaluation set.

    g(theta) = sum_i c_i * l_i(theta) with c = 1 by default. There is no
    regularizer on the outer objective.
    """

    dataset: WeightedDataset
    family: str
    n_classes: int | None = None
    n_components: int | None = None
    weights: np.ndarray | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise CoreselectError(f"unknown loss family {self.family!r}")
        if self.dataset.n == 0:
            raise CoreselectError("evaluation set must be nonempty")
        if self.family == "multiclass-logistic" and self.n_classes is None:
            object.__setattr__(self, "n_classes", _infer_classes(self.dataset))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.dataset.n,):
                raise CoreselectError("outer weights must match the evaluation set")
            object.__setattr__(self, "weights", w)

    def as_problem(self) -> InnerProblem:
        cached = getattr(self, "_problem", None)
        if cached is None:
            cached = InnerProblem(self.dataset, self.family, 0.0,
                                  self.n_classes, self.n_components)
            object.__setattr__(self, "_problem", cached)
        return cached


def _infer_classes(ds: WeightedDataset) -> int:
    if ds.label_kind == "soft":
        return ds.labels.shape[1]
    if ds.label_kind == "class":
        return int(ds.labels.max()) + 1
    raise CoreselectError("cannot infer class count without class labels")


# ---------------------------------------------------------------------------
# family primitives


def _targets_binary(ds: WeightedDataset) -> np.ndarray:
    cached = getattr(ds, "_bin_targets", None)
    if cached is not None:
        return cached
    if ds.label_kind == "class":
        y = ds.labels.astype(np.float64)
        if y.size and (y.min() < 0 or y.max() > 1):
            raise CoreselectError("binary-logistic needs labels in {0, 1}")
    else:
        y = np.asarray(ds.labels, dtype=np.float64)
        if y.ndim != 1 or (y.size and (y.min() < 0 or y.max() > 1)):
            raise CoreselectError("binary-logistic soft labels must lie in [0, 1]")
    object.__setattr__(ds, "_bin_targets", y)
    return y


def _targets_multiclass(ds: WeightedDataset, c: int) -> np.ndarray:
    cached = getattr(ds, "_mc_targets", None)
    if cached is not None and cached.shape[1] == c:
        return cached
    if ds.label_kind == "soft":
        t = np.asarray(ds.labels, dtype=np.float64)
        if t.shape[1] != c:
            raise CoreselectError("soft labels have wrong class count")
    else:
        t = np.zeros((ds.n, c))
        t[np.arange(ds.n), ds.labels] = 1.0
    object.__setattr__(ds, "_mc_targets", t)
    return t


def _sigmoid(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    pos = s >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-s[pos]))
    es = np.exp(s[~pos])
    out[~pos] = es / (1.0 + es)
    return out


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _log1pexp(s: np.ndarray) -> np.ndarray:
    out = np.empty_like(s)
    big = s > 30
    out[big] = s[big]
    out[~big] = np.log1p(np.exp(s[~big]))
    return out


def _point_losses(p: InnerProblem, theta: np.ndarray, idx) -> np.ndarray:
    if idx is None:
        x = p.dataset.features
    else:
        x = p.dataset.features[idx]
    if p.family == "ridge":
        y = p.dataset.labels.astype(np.float64)
        y = y if idx is None else y[idx]
        return (x @ theta - y) ** 2
    if p.family == "binary-logistic":
        y = _targets_binary(p.dataset)
        y = y if idx is None else y[idx]
        s = x @ theta
        return _log1pexp(s) - y * s
    if p.family == "multiclass-logistic":
        t = _targets_multiclass(p.dataset, p.n_classes)
        t = t if idx is None else t[idx]
        scores = x @ theta.reshape(p.param_shape)
        shifted = scores - scores.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1)) + scores.max(axis=1)
        return logz - (t * scores).sum(axis=1)
    from . import gmm

    return gmm.point_nll(theta, x, p.n_components, p.dataset.dim)


def _point_grads(p: InnerProblem, theta: np.ndarray, idx) -> np.ndarray:
    if idx is None:
        x = p.dataset.features
    else:
        x = p.dataset.features[idx]
    if p.family == "ridge":
        y = p.dataset.labels.astype(np.float64)
        y = y if idx is None else y[idx]
        return 2.0 * (x @ theta - y)[:, None] * x
    if p.family == "binary-logistic":
        y = _targets_binary(p.dataset)
        y = y if idx is None else y[idx]
        s = _sigmoid(x @ theta)
        return (s - y)[:, None] * x
    if p.family == "multiclass-logistic":
        t = _targets_multiclass(p.dataset, p.n_classes)
        t = t if idx is None else t[idx]
        probs = _softmax(x @ theta.reshape(p.param_shape))
        # row k is x_k outer (p_k - t_k), flattened row-major to match theta
        return np.einsum("id,ic->idc", x, probs - t).reshape(x.shape[0], -1)
    from . import gmm

    return gmm.point_nll_grads(theta, x, p.n_components, p.dataset.dim)


def _weighted_hvp(p: InnerProblem, theta: np.ndarray, w: np.ndarray,
                  v: np.ndarray) -> np.ndarray:
    x = p.dataset.features
    if p.family == "gmm-nll":
        from . import gmm

        return gmm.weighted_hvp(theta, x, w, v, p.n_components,
                                p.dataset.dim) + 2.0 * p.l2_reg * v
    # zero-weight rows contribute nothing; restrict to the support
    active = np.flatnonzero(w)
    if active.size < x.shape[0]:
        x = x[active]
        w = w[active]
    if p.family == "ridge":
        return 2.0 * (x.T @ (w * (x @ v))) + 2.0 * p.l2_reg * v
    if p.family == "binary-logistic":
        s = _sigmoid(x @ theta)
        coef = w * s * (1.0 - s)
        return x.T @ (coef * (x @ v)) + 2.0 * p.l2_reg * v
    shape = p.param_shape
    probs = _softmax(x @ theta.reshape(shape))
    u = x @ v.reshape(shape)
    row_dot = (probs * u).sum(axis=1)
    inner = probs * (u - row_dot[:, None])
    return (x.T @ (w[:, None] * inner)).reshape(-1) + 2.0 * p.l2_reg * v


# ---------------------------------------------------------------------------
# public derivative oracles


def _theta_of(params) -> np.ndarray:
    if isinstance(params, ModelParams):
        return params.theta
    return np.asarray(params, dtype=np.float64).ravel()


def _index_set(p: InnerProblem, index_set):
    if index_set is None:
        return None
    return np.asarray(index_set, dtype=np.int64)


def loss(p: InnerProblem, params, index_set=None) -> float:
    """Unweighted sum of per-point losses over index_set (all points by default)."""
    idx = _index_set(p, index_set)
    return float(_point_losses(p, _theta_of(params), idx).sum())


def per_point_grads(p: InnerProblem, params, index_set=None) -> np.ndarray:
    """Matrix whose row k is the parameter gradient of the k-th point's loss."""
    idx = _index_set(p, index_set)
    return _point_grads(p, _theta_of(params), idx)


def grad_weighted(p: InnerProblem, params, w: np.ndarray) -> np.ndarray:
    """Gradient of f(theta, w) = sum_i w_i l_i(theta) + l2_reg ||theta||^2."""
    theta = _theta_of(params)
    w = np.asarray(w, dtype=np.float64)
    grads = _point_grads(p, theta, None)
    return grads.T @ w + 2.0 * p.l2_reg * theta


def hvp(p: InnerProblem, params, w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Analytic Hessian-vector product of f(theta, w) at theta, applied to v."""
    theta = _theta_of(params)
    v = np.asarray(v, dtype=np.float64).ravel()
    if v.shape[0] != p.param_dim:
        raise CoreselectError(f"v must have length {p.param_dim}")
    return _weighted_hvp(p, theta, np.asarray(w, dtype=np.float64), v)


def outer_loss(outer: OuterObjective, params) -> float:
    p = outer.as_problem()
    losses = _point_losses(p, _theta_of(params), None)
    if outer.weights is not None:
        return float(losses @ outer.weights)
    return float(losses.sum())


def outer_grad(outer: OuterObjective, params) -> np.ndarray:
    p = outer.as_problem()
    grads = _point_grads(p, _theta_of(params), None)
    if outer.weights is not None:
        return grads.T @ outer.weights
    return grads.sum(axis=0)


# ---------------------------------------------------------------------------
# solvers


def init_params(p: InnerProblem) -> ModelParams:
    if p.family == "gmm-nll":
        raise CoreselectError("gmm-nll parameters come from gmm_em_fit")
    return ModelParams(np.zeros(p.param_dim), p.family, p.param_shape)


def solve_inner(p: InnerProblem, w, warm_start: ModelParams | None = None,
                budget: SolveBudget | None = None) -> ModelParams:
    """Minimize f(theta, w) over theta.

    ridge: exact normal-equations solve (Cholesky). logistic families: damped
    Newton with backtracking line search until the gradient norm is within
    budget.tol. gmm-nll: weighted EM until the NLL change is within budget.tol.
    Non-convergence within the budget flags the result instead of raising.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (p.dataset.n,):
        raise CoreselectError("w must have one entry per dataset row")
    if not (w > 0).any() and p.l2_reg == 0:
        raise CoreselectError("need at least one positive weight or l2_reg > 0")
    budget = budget or SolveBudget()

    if p.family == "ridge":
        return _solve_ridge(p, w)
    if p.family == "gmm-nll":
        from . import gmm

        seed = 0 if warm_start is None else None
        return gmm_em_fit(p.dataset, p.n_components, w, seed=seed,
                          budget=budget, warm_start=warm_start)
    return _solve_logistic(p, w, warm_start, budget)


def _solve_ridge(p: InnerProblem, w: np.ndarray) -> ModelParams:
    x = p.dataset.features
    y = p.dataset.labels.astype(np.float64)
    active = w != 0
    xa = x[active]
    wa = w[active]
    a = xa.T @ (wa[:, None] * xa) + p.l2_reg * np.eye(p.dataset.dim)
    b = xa.T @ (wa * y[active])
    if p.l2_reg == 0:
        rank = np.linalg.matrix_rank(a)
        if rank < p.dataset.dim:
            raise SolverError(
                f"singular normal equations with l2_reg=0: rank {rank} < dim "
                f"{p.dataset.dim}; add regularization or more support points"
            )
    try:
        theta = linalg.solve_psd(a, b)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - guarded above
        raise SolverError(f"ridge solve failed: {exc}") from exc
    return ModelParams(theta, p.family, p.param_shape)


def _solve_logistic(p: InnerProblem, w: np.ndarray, warm_start: ModelParams | None,
                    budget: SolveBudget) -> ModelParams:
    # Zero-weight rows contribute nothing; the Newton loop runs on raw support
    # arrays (warm re-solves inside selection loops hit the gradient check
    # immediately).
    active = np.flatnonzero(w)
    x = p.dataset.features
    if active.size < x.shape[0]:
        x = x[active]
        wa = w[active]
    else:
        wa = w
    dim = p.param_dim
    theta = warm_start.theta.copy() if warm_start is not None else np.zeros(dim)
    reg = p.l2_reg
    binary = p.family == "binary-logistic"
    if binary:
        t = _targets_binary(p.dataset)
        ta = t[active] if active.size < p.dataset.n else t
    else:
        shape = p.param_shape
        t = _targets_multiclass(p.dataset, shape[1])
        ta = t[active] if active.size < p.dataset.n else t

    def value_grad(th):
        if binary:
            s = x @ th
            probs = _sigmoid(s)
            losses = _log1pexp(s) - ta * s
            grad = x.T @ (wa * (probs - ta)) + 2.0 * reg * th
        else:
            scores = x @ th.reshape(shape)
            peak = scores.max(axis=1, keepdims=True) if len(scores) else scores
            if len(scores):
                logz = np.log(np.exp(scores - peak).sum(axis=1)) + peak[:, 0]
            else:
                logz = np.zeros(0)
            losses = logz - (ta * scores).sum(axis=1)
            probs = _softmax(scores) if len(scores) else scores
            grad = (x.T @ (wa[:, None] * (probs - ta))).reshape(-1) \
                + 2.0 * reg * th
        return float(losses @ wa + reg * (th @ th)), grad, probs

    f_val, grad, probs = value_grad(theta)
    newton_iters = max(2, budget.max_iters // 100)
    converged = False
    for _ in range(newton_iters):
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= budget.tol:
            converged = True
            break
        step = _newton_direction(p, x, wa, probs, grad, dim)
        t_step = 1.0
        descent = float(grad @ step)
        if descent >= 0:  # fall back to steepest descent
            step = -grad
            descent = -float(grad @ grad)
        accepted = False
        for _ in range(40):
            cand = theta + t_step * step
            cand_val, cand_grad, cand_probs = value_grad(cand)
            if cand_val <= f_val + 1e-4 * t_step * descent:
                accepted = True
                break
            t_step *= 0.5
        if not accepted:
            break
        theta, f_val, grad, probs = cand, cand_val, cand_grad, cand_probs
    if not converged:
        gnorm = float(np.linalg.norm(grad))
        converged = gnorm <= budget.tol
    diag = "" if converged else f"gradient norm above tol {budget.tol:.1e}"
    return ModelParams(theta, p.family, p.param_shape, converged=converged,
                       diagnostic=diag)


def _newton_direction(p: InnerProblem, x, wa, probs, grad, dim) -> np.ndarray:
    if dim <= _DENSE_NEWTON_LIMIT:
        h = _dense_hessian_arrays(p, x, wa, probs)
        return -linalg.solve_psd(h, grad, jitter=1e-12)
    if p.family == "binary-logistic":
        coef = wa * probs * (1.0 - probs)

        def apply_h(v):
            return x.T @ (coef * (x @ v)) + 2.0 * p.l2_reg * v
    else:
        shape = p.param_shape

        def apply_h(v):
            u = x @ v.reshape(shape)
            row_dot = (probs * u).sum(axis=1)
            inner = probs * (u - row_dot[:, None])
            return (x.T @ (wa[:, None] * inner)).reshape(-1) \
                + 2.0 * p.l2_reg * v
    step, _, _ = linalg.cg(lambda v: apply_h(v) + 1e-12 * v, -grad,
                           tol=1e-10, max_iters=200)
    return step


def _dense_hessian_arrays(p: InnerProblem, x, wa, probs) -> np.ndarray:
    if p.family == "binary-logistic":
        coef = wa * probs * (1.0 - probs)
        return x.T @ (coef[:, None] * x) + 2.0 * p.l2_reg * np.eye(x.shape[1])
    d, c = p.param_shape
    h = np.empty((d * c, d * c))
    for j in range(c):
        for k in range(j, c):
            coef = wa * (probs[:, j] * ((j == k) - probs[:, k]))
            block = x.T @ (coef[:, None] * x)
            h[j::c, k::c] = block
            if k != j:
                h[k::c, j::c] = block
    return h + 2.0 * p.l2_reg * np.eye(d * c)


# ---------------------------------------------------------------------------
# GMM front door (implementation lives in gmm.py)


def gmm_em_fit(ds: WeightedDataset, k: int, w, seed: int | None = 0,
               budget: SolveBudget | None = None,
               warm_start: ModelParams | None = None) -> ModelParams:
    """Weighted EM fit of a k-component Gaussian mixture; see gmm module."""
    from . import gmm

    return gmm.em_fit(ds, k, np.asarray(w, dtype=np.float64), seed=seed,
                      budget=budget or SolveBudget(), warm_start=warm_start)


def gmm_nll(ds: WeightedDataset, params: ModelParams, w) -> float:
    """Weighted negative marginal log-likelihood sum_i w_i * (-log p(x_i))."""
    from . import gmm

    k, d = params.shape
    nll = gmm.point_nll(params.theta, ds.features, k, d)
    return float(nll @ np.asarray(w, dtype=np.float64))


# ---------------------------------------------------------------------------
# prediction and serialization


def predict_proba(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if params.family == "binary-logistic":
        return _sigmoid(x @ params.theta)
    if params.family == "multiclass-logistic":
        return _softmax(x @ params.theta.reshape(params.shape))
    raise CoreselectError(f"predict_proba undefined for family {params.family!r}")


def predict(params: ModelParams, features: np.ndarray) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if params.family == "ridge":
        return x @ params.theta
    if params.family == "binary-logistic":
        return (predict_proba(params, x) >= 0.5).astype(np.int64)
    if params.family == "multiclass-logistic":
        return predict_proba(params, x).argmax(axis=1)
    raise CoreselectError(f"predict undefined for family {params.family!r}")


def params_to_json(params: ModelParams) -> str:
    return json.dumps({
        "family": params.family,
        "shape": list(params.shape),
        "theta": [float(v) for v in params.theta],
        "converged": params.converged,
    })


def params_from_json(text: str) -> ModelParams:
    doc = json.loads(text)
    return ModelParams(np.asarray(doc["theta"], dtype=np.float64), doc["family"],
                       tuple(doc["shape"]), converged=doc.get("converged", True))
