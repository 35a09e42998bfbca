"""Coreset selection algorithms.

All selectors operate on a weight objective: something exposing value(w) and
gradient(w). The bilevel path wraps an inner problem, an outer objective and a
hypergradient config into such an objective; closed-form objectives (see
expdesign) plug in directly. Greedy variants grow/shrink the support by the
most negative (largest, for removal) weight-gradient coordinates; the
regularized variant runs projected gradient descent on the simplex with an
L1/2 sparsity penalty and beta-doubling.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import hypergrad, models
from .data import WeightedDataset, concat_datasets
from .errors import CoreselectError, SparsityError

logger = logging.getLogger(__name__)

__all__ = [
    "CoresetState",
    "SelectionConfig",
    "RegularizedConfig",
    "SelectionTrace",
    "BilevelObjective",
    "forward_select",
    "batch_forward_select",
    "exchange_select",
    "eliminate_select",
    "forward_select_objective",
    "batch_forward_select_objective",
    "simplex_project",
    "regularized_select",
    "joint_forward_select",
    "joint_objective_value",
    "al_acquire",
    "state_to_csv",
    "state_from_csv",
    "state_to_json",
]


@dataclass(frozen=True)
class CoresetState:
    """Ordered selected indices plus the sparse weight vector over the universe."""

    selected: tuple
    weights: np.ndarray

    def __post_init__(self):
        sel = tuple(int(i) for i in self.selected)
        if len(set(sel)) != len(sel):
            raise CoreselectError("selected indices contain duplicates")
        w = np.asarray(self.weights, dtype=np.float64)
        if (w < 0).any() or not np.isfinite(w).all():
            raise CoreselectError("weights must be finite and nonnegative")
        support = set(np.flatnonzero(w).tolist())
        if not support <= set(sel):
            raise CoreselectError("weight support must be inside the selected set")
        object.__setattr__(self, "selected", sel)
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return len(self.selected)

    def truncate(self, size: int) -> "CoresetState":
        """Keep the first `size` selected indices (greedy prefix)."""
        keep = self.selected[:size]
        w = np.zeros_like(self.weights)
        keep_arr = np.asarray(keep, dtype=np.int64)
        w[keep_arr] = self.weights[keep_arr]
        return CoresetState(keep, w)


@dataclass(frozen=True)
class SelectionConfig:
    variant: str = "forward"  # forward | forward-batch | exchange | eliminate
    m: int = 1
    batch: int = 1
    exchange_steps: int = 0
    weighted: bool = False
    weight_opt_iters: int = 150
    weight_step_size: float | str = 0.01  # "auto" = Armijo backtracking from 1
    seed: int = 0
    initial_pool: int | None = None  # forward-batch; default max(b, 0.5% of n)

    def __post_init__(self):
        if self.batch < 1:
            raise CoreselectError("batch must be >= 1")
        if self.m < 1:
            raise CoreselectError("m must be >= 1")
        if self.variant == "exchange" and self.batch > self.m:
            raise CoreselectError("exchange requires batch <= m")


@dataclass(frozen=True)
class RegularizedConfig:
    sparsity_penalty: float = 1e-7  # beta, doubled on support plateaus
    inner_reg: float = 1e-4
    outer_steps: int = 100
    plateau_window: int = 5
    epsilon_mix: float = 1e-8
    prune_threshold: float = 1e-4
    step_size: float = 0.05
    beta_limit: float = 1e6

    def __post_init__(self):
        if self.sparsity_penalty < 0:
            raise CoreselectError("sparsity_penalty must be >= 0")
        if self.prune_threshold <= self.epsilon_mix:
            raise CoreselectError("prune_threshold must exceed epsilon_mix")


@dataclass
class SelectionTrace:
    """Selection history: (round, chosen indices, objective value)."""

    rows: list = field(default_factory=list)

    def add(self, round_no: int, chosen, value: float) -> None:
        self.rows.append((round_no, tuple(int(c) for c in chosen), float(value)))

    def values(self) -> np.ndarray:
        return np.asarray([r[2] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("round,chosen,objective\n")
            for round_no, chosen, value in self.rows:
                chosen_str = ";".join(str(c) for c in chosen)
                fh.write(f"{round_no},{chosen_str},{format(value, '.17g')}\n")


class BilevelObjective:
    """G(w) = outer loss at the inner optimum, with warm-started solves."""

    def __init__(self, inner: models.InnerProblem, outer: models.OuterObjective,
                 hcfg: hypergrad.HypergradConfig | None = None,
                 budget: models.SolveBudget | None = None):
        self.inner = inner
        self.outer = outer
        self.hcfg = hcfg or hypergrad.HypergradConfig()
        self.budget = budget or models.SolveBudget()
        self.n = inner.dataset.n
        self._warm: models.ModelParams | None = None

    def solve(self, w) -> models.ModelParams:
        params = models.solve_inner(self.inner, w, warm_start=self._warm,
                                    budget=self.budget)
        self._warm = params
        return params

    def value(self, w) -> float:
        return models.outer_loss(self.outer, self.solve(w))

    def gradient(self, w, coords=None) -> np.ndarray:
        return hypergrad.implicit_gradient(self.inner, self.outer, w,
                                           self.solve(w), self.hcfg, coords)

    def value_and_gradient(self, w, coords=None):
        params = self.solve(w)
        grad = hypergrad.implicit_gradient(self.inner, self.outer, w, params,
                                           self.hcfg, coords)
        return models.outer_loss(self.outer, params), grad


# ---------------------------------------------------------------------------
# weight optimization (Algorithm line: local min of G restricted to a support)


def _optimize_weights(obj, w: np.ndarray, support, iters: int,
                      step_size) -> np.ndarray:
    """Projected gradient descent on the support, projection = clamp at 0.

    A fixed base step is halved within an iteration until the objective does
    not increase (monotone safeguard); step_size="auto" runs Armijo
    backtracking from 1 instead.
    """
    support = np.asarray(sorted(support), dtype=np.int64)
    w = np.asarray(w, dtype=np.float64).copy()
    value = obj.value(w)
    adaptive = step_size == "auto"
    base = 1.0 if adaptive else float(step_size)
    step = base
    for _ in range(iters):
        grad = obj.gradient(w, coords=support)
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0.0:
            break
        if not adaptive:
            step = base
        accepted = False
        for _ in range(30):
            trial = w.copy()
            trial[support] = np.maximum(w[support] - step * grad, 0.0)
            move = trial[support] - w[support]
            move_norm2 = float(move @ move)
            if move_norm2 == 0.0:
                break
            trial_value = obj.value(trial)
            if trial_value <= value - 1e-4 / step * move_norm2:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        w = trial
        value = trial_value
        if adaptive:
            step *= 2.0
    return w


def _rank_vector(grad: np.ndarray, atom_weights: np.ndarray) -> np.ndarray:
    # Directional derivative of G along adding each atom at its weight.
    return atom_weights * grad


# ---------------------------------------------------------------------------
# greedy variants over a generic weight objective


def forward_select_objective(obj, cfg: SelectionConfig,
                             atom_weights: np.ndarray | None = None,
                             candidates=None,
                             trace: SelectionTrace | None = None) -> CoresetState:
    """One-by-one greedy forward selection (weighted or not).

    Per round: optionally optimize support-restricted weights by projected
    gradient descent on implicit gradients, then add the candidate with the
    most negative weight gradient (ties to the lowest index) at its atom
    weight; a final weight optimization follows the last addition.
    """
    n = obj.n
    if cfg.m > n:
        raise CoreselectError("m cannot exceed the number of candidates")
    rng = np.random.default_rng(cfg.seed)
    aw = np.ones(n) if atom_weights is None else np.asarray(atom_weights, float)
    cand = np.arange(n) if candidates is None else np.asarray(candidates, np.int64)

    w = np.zeros(n)
    first = int(rng.choice(cand))
    selected = [first]
    w[first] = aw[first]
    if trace is not None:
        trace.add(1, [first], obj.value(w))
    for _ in range(2, cfg.m + 1):
        if cfg.weighted:
            w = _optimize_weights(obj, w, selected, cfg.weight_opt_iters,
                                  cfg.weight_step_size)
        grad = obj.gradient(w)
        rank = _rank_vector(grad, aw)
        mask = np.full(n, np.inf)
        mask[cand] = 0.0
        mask[selected] = np.inf
        k = int(np.argmin(rank + mask))
        selected.append(k)
        w[k] = aw[k]
        if trace is not None:
            trace.add(len(selected), [k], obj.value(w))
    if cfg.weighted:
        w = _optimize_weights(obj, w, selected, cfg.weight_opt_iters,
                              cfg.weight_step_size)
        if trace is not None:
            trace.add(len(selected), [], obj.value(w))
    return CoresetState(tuple(selected), w)


def batch_forward_select_objective(obj, cfg: SelectionConfig,
                                   atom_weights: np.ndarray | None = None,
                                   candidates=None,
                                   trace: SelectionTrace | None = None,
                                   scorers=None) -> CoresetState:
    """Unweighted forward selection in batches of cfg.batch.

    Starts from a small random pool and adds the b candidates with the
    smallest weight gradient per round until m points are selected. `scorers`
    optionally supplies one objective per round (joint selection alternates
    models); obj still defines the candidate universe.
    """
    n = obj.n
    if cfg.m > n:
        raise CoreselectError("m cannot exceed the number of candidates")
    rng = np.random.default_rng(cfg.seed)
    aw = np.ones(n) if atom_weights is None else np.asarray(atom_weights, float)
    cand = np.arange(n) if candidates is None else np.asarray(candidates, np.int64)

    pool = cfg.initial_pool
    if pool is None:
        pool = max(cfg.batch, math.ceil(0.005 * n))
    pool = min(pool, cfg.m, len(cand))
    start = rng.choice(cand, size=pool, replace=False)
    selected = [int(i) for i in start]
    w = np.zeros(n)
    w[start] = aw[start]

    round_no = 0
    while len(selected) < cfg.m:
        scorer = obj if scorers is None else scorers[round_no % len(scorers)]
        value, grad = scorer.value_and_gradient(w)
        rank = _rank_vector(grad, aw)
        mask = np.full(n, np.inf)
        mask[cand] = 0.0
        mask[selected] = np.inf
        take = min(cfg.batch, cfg.m - len(selected))
        order = np.argsort(rank + mask, kind="stable")[:take]
        for k in order:
            selected.append(int(k))
            w[k] = aw[k]
        if trace is not None:
            trace.add(round_no, order, value)
        round_no += 1
    return CoresetState(tuple(selected), w)


def _exchange_objective(obj, cfg: SelectionConfig, atom_weights, trace):
    n = obj.n
    rng = np.random.default_rng(cfg.seed)
    aw = np.ones(n) if atom_weights is None else np.asarray(atom_weights, float)
    start = rng.choice(n, size=cfg.m, replace=False)
    selected = [int(i) for i in start]
    w = np.zeros(n)
    w[start] = aw[start]
    for step in range(cfg.exchange_steps):
        value, grad = obj.value_and_gradient(w)
        rank = _rank_vector(grad, aw)
        sel_arr = np.asarray(selected)
        worst_local = np.argsort(-rank[sel_arr], kind="stable")[:cfg.batch]
        removed = sel_arr[worst_local]
        mask = np.zeros(n)
        mask[sel_arr] = np.inf  # additions come from outside the pre-step set
        best = np.argsort(rank + mask, kind="stable")[:cfg.batch]
        for r in removed:
            selected.remove(int(r))
            w[r] = 0.0
        for k in best:
            selected.append(int(k))
            w[k] = aw[k]
        if trace is not None:
            trace.add(step, best, value)
    return CoresetState(tuple(selected), w)


def _eliminate_objective(obj, cfg: SelectionConfig, atom_weights, trace):
    n = obj.n
    aw = np.ones(n) if atom_weights is None else np.asarray(atom_weights, float)
    selected = list(range(n))
    w = aw.copy()
    round_no = 0
    while len(selected) > cfg.m:
        value, grad = obj.value_and_gradient(w)
        rank = _rank_vector(grad, aw)
        sel_arr = np.asarray(selected)
        drop = min(cfg.batch, len(selected) - cfg.m)
        worst_local = np.argsort(-rank[sel_arr], kind="stable")[:drop]
        removed = sel_arr[worst_local]
        for r in removed:
            selected.remove(int(r))
            w[r] = 0.0
        if trace is not None:
            trace.add(round_no, removed, value)
        round_no += 1
    return CoresetState(tuple(selected), w)


# ---------------------------------------------------------------------------
# bilevel front doors


def forward_select(inner: models.InnerProblem, outer: models.OuterObjective,
                   cfg: SelectionConfig,
                   hcfg: hypergrad.HypergradConfig | None = None,
                   trace: SelectionTrace | None = None) -> CoresetState:
    obj = BilevelObjective(inner, outer, hcfg)
    return forward_select_objective(obj, cfg, trace=trace)


def batch_forward_select(inner, outer, cfg: SelectionConfig, hcfg=None,
                         trace=None, atom_weights=None,
                         candidates=None) -> CoresetState:
    obj = BilevelObjective(inner, outer, hcfg)
    return batch_forward_select_objective(obj, cfg, atom_weights=atom_weights,
                                          candidates=candidates, trace=trace)


def exchange_select(inner, outer, cfg: SelectionConfig, hcfg=None,
                    trace=None) -> CoresetState:
    obj = BilevelObjective(inner, outer, hcfg)
    return _exchange_objective(obj, cfg, None, trace)


def eliminate_select(inner, outer, cfg: SelectionConfig, hcfg=None,
                     trace=None) -> CoresetState:
    obj = BilevelObjective(inner, outer, hcfg)
    return _eliminate_objective(obj, cfg, None, trace)


# ---------------------------------------------------------------------------
# regularized variant


def simplex_project(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-and-threshold)."""
    v = np.asarray(v, dtype=np.float64)
    u = np.sort(v)[::-1]
    css = np.cumsum(u)
    idx = np.arange(1, len(v) + 1)
    positive = u - (css - 1.0) / idx > 0
    rho = np.nonzero(positive)[0][-1]
    tau = (css[rho] - 1.0) / (rho + 1)
    return np.maximum(v - tau, 0.0)


def regularized_select(inner: models.InnerProblem,
                       outer: models.OuterObjective,
                       rcfg: RegularizedConfig,
                       hcfg: hypergrad.HypergradConfig | None = None,
                       target_m: int | None = None,
                       trace: SelectionTrace | None = None) -> CoresetState:
    """Simplex-constrained selection with an L1/2 sparsity penalty.

    Starts from uniform weights; each outer step takes a projected gradient
    step on G(w) + beta * sum_i sqrt(w_i), then mixes with the uniform vector
    so no weight is exactly 0. When the support size plateaus, beta doubles;
    the loop stops after outer_steps or once the support reaches target_m,
    whichever comes first. Weights below prune_threshold are zeroed at the end.
    """
    if rcfg.outer_steps > 0 and inner.l2_reg <= 0:
        raise CoreselectError("regularized selection expects an inner L2 "
                              "regularizer (l2_reg > 0)")
    n = inner.dataset.n
    obj = BilevelObjective(inner, outer, hcfg)
    w = np.full(n, 1.0 / n)
    beta = rcfg.sparsity_penalty
    eps = rcfg.epsilon_mix
    support_size = n
    plateau = 0
    stopped_by = "outer_steps"
    for step in range(rcfg.outer_steps):
        grad = obj.gradient(w) + beta / (2.0 * np.sqrt(w))
        w_tilde = simplex_project(w - rcfg.step_size * grad)
        w = (1.0 - eps) * w_tilde + eps / n
        new_support = int((w >= rcfg.prune_threshold).sum())
        if trace is not None:
            trace.add(step, [], float(new_support))
        if target_m is not None:
            if new_support <= target_m:
                stopped_by = "target_m"
                break
            if new_support == support_size:
                plateau += 1
                if plateau >= rcfg.plateau_window:
                    beta *= 2.0
                    plateau = 0
                    if beta > rcfg.beta_limit:
                        raise SparsityError(
                            f"beta doubled past {rcfg.beta_limit:.0e} without "
                            f"reaching target support {target_m} "
                            f"(achieved {new_support})", new_support)
            else:
                plateau = 0
                support_size = new_support
    logger.info("regularized_select stopped by %s", stopped_by)
    w = np.where(w < rcfg.prune_threshold, 0.0, w)
    selected = np.flatnonzero(w)
    if selected.size == 0:
        raise SparsityError(
            "pruning removed every weight: uniform 1/n is below the prune "
            "threshold (n too large for the threshold)", 0)
    return CoresetState(tuple(int(i) for i in selected), w)


# ---------------------------------------------------------------------------
# joint coresets and batch active learning


def joint_forward_select(inners, outers, lambda_joint: float,
                         cfg: SelectionConfig,
                         hcfg: hypergrad.HypergradConfig | None = None,
                         trace: SelectionTrace | None = None) -> CoresetState:
    """Batch-forward selection alternating the scoring model per round.

    All models share one index set; weights stay binary. lambda_joint only
    scales the non-primary models' losses when reporting the joint objective
    (see joint_objective_value).
    """
    if len(inners) < 2 or len(inners) != len(outers):
        raise CoreselectError("joint selection needs >= 2 aligned models")
    sizes = {i.dataset.n for i in inners}
    if len(sizes) != 1:
        raise CoreselectError("joint selection needs a shared dataset universe")
    objs = [BilevelObjective(i, o, hcfg) for i, o in zip(inners, outers)]
    return batch_forward_select_objective(objs[0], cfg, trace=trace,
                                          scorers=objs)


def joint_objective_value(inners, outers, lambda_joint: float,
                          state: CoresetState,
                          hcfg: hypergrad.HypergradConfig | None = None) -> float:
    """Joint G = G_1 + lambda_joint * sum of the remaining models' G."""
    total = 0.0
    for pos, (inner, outer) in enumerate(zip(inners, outers)):
        params = models.solve_inner(inner, state.weights)
        value = models.outer_loss(outer, params)
        total += value if pos == 0 else lambda_joint * value
    return total


def al_acquire(labeled: WeightedDataset, unlabeled: WeightedDataset,
               model_family: str, m: int, cfg: SelectionConfig,
               hcfg: hypergrad.HypergradConfig | None = None,
               l2_reg: float = 1e-2,
               budget: models.SolveBudget | None = None) -> list[int]:
    """Select m pool points to label next.

    Trains the model on the labeled set, soft-pseudo-labels the pool with its
    predictions, then greedily picks pool points so that labeled + picked is a
    good coreset of labeled + the whole pseudo-labeled pool: the inner problem
    holds labeled points at weight 1 plus the picked points, the outer loss
    runs over everything. Returns indices into the unlabeled pool in pick
    order.
    """
    if m > unlabeled.n:
        raise CoreselectError("m cannot exceed the unlabeled pool size")
    if model_family not in ("binary-logistic", "multiclass-logistic"):
        raise CoreselectError("al_acquire supports the logistic families")

    sup = models.InnerProblem(labeled, model_family, l2_reg)
    fitted = models.solve_inner(sup, np.ones(labeled.n), budget=budget)
    probs = models.predict_proba(fitted, unlabeled.features)

    if model_family == "binary-logistic":
        lab = WeightedDataset(labeled.features, labeled.labels.astype(np.float64))
        pool = WeightedDataset(unlabeled.features, probs)
        n_classes = None
    else:
        c = probs.shape[1]
        onehot = np.zeros((labeled.n, c))
        onehot[np.arange(labeled.n), labeled.labels] = 1.0
        lab = WeightedDataset(labeled.features, onehot)
        pool = WeightedDataset(unlabeled.features, probs)
        n_classes = c
    combined = concat_datasets([lab, pool])
    inner = models.InnerProblem(combined, model_family, l2_reg, n_classes)
    outer = models.OuterObjective(combined, model_family, n_classes)
    obj = BilevelObjective(inner, outer, hcfg, budget)

    w = np.zeros(combined.n)
    w[:labeled.n] = 1.0
    picked: list[int] = []
    for _ in range(m):
        grad = obj.gradient(w)
        rank = grad.copy()
        rank[:labeled.n] = np.inf
        taken = [labeled.n + k for k in picked]
        rank[taken] = np.inf
        k = int(np.argmin(rank))
        w[k] = 1.0
        picked.append(k - labeled.n)
    return picked


# ---------------------------------------------------------------------------
# serialization


def state_to_csv(state: CoresetState, path) -> None:
    with open(path, "w") as fh:
        fh.write("index,weight\n")
        for i in state.selected:
            fh.write(f"{i},{format(float(state.weights[i]), '.17g')}\n")


def state_from_csv(path, n: int) -> CoresetState:
    selected = []
    weights = np.zeros(n)
    with open(path) as fh:
        next(fh)
        for line in fh:
            idx_str, w_str = line.strip().split(",")
            selected.append(int(idx_str))
            weights[int(idx_str)] = float(w_str)
    return CoresetState(tuple(selected), weights)


def state_to_json(state: CoresetState) -> str:
    return json.dumps({
        "selected": list(state.selected),
        "weights": {str(i): float(state.weights[i]) for i in state.selected},
    })
