"""Gaussian mixture NLL: weighted EM solver plus exact derivative oracles.

Parameters are packed into one flat vector so the generic gradient machinery
applies: [mixture logits (k), means (k*d, row-major), lower-Cholesky factors
of the covariances (k * d(d+1)/2, row-major per component)]. The derivative
oracles are produced by automatic differentiation of the packed NLL, which is
exact to machine precision; EM itself runs in plain numpy.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
import scipy.linalg as sla

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp  # noqa: E402
from jax.scipy.linalg import solve_triangular as jax_solve_triangular  # noqa: E402
from jax.scipy.special import logsumexp as jax_logsumexp  # noqa: E402

from .errors import CoreselectError, SolverError  # noqa: E402

COV_FLOOR = 1e-6  # added to every covariance update
_LOG_2PI = float(np.log(2.0 * np.pi))
_PAD = 32  # weighted ops pad the point dimension to multiples of this


def param_dim(k: int, d: int) -> int:
    return k + k * d + k * (d * (d + 1) // 2)


def pack(pi: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    k, d = means.shape
    logits = np.log(np.maximum(pi, 1e-300))
    logits -= logits.mean()
    rows, cols = np.tril_indices(d)
    tril = np.stack([np.linalg.cholesky(covs[j])[rows, cols] for j in range(k)])
    return np.concatenate([logits, means.ravel(), tril.ravel()])


def unpack(theta: np.ndarray, k: int, d: int):
    logits = theta[:k]
    means = theta[k:k + k * d].reshape(k, d)
    packed = theta[k + k * d:].reshape(k, d * (d + 1) // 2)
    rows, cols = np.tril_indices(d)
    chol = np.zeros((k, d, d))
    chol[:, rows, cols] = packed
    pi = np.exp(logits - logits.max())
    pi /= pi.sum()
    covs = chol @ chol.transpose(0, 2, 1)
    return pi, means, chol, covs


@lru_cache(maxsize=None)
def _compiled(k: int, d: int):
    rows, cols = jnp.tril_indices(d)

    def log_marginal(theta, x):
        logits = theta[:k]
        means = theta[k:k + k * d].reshape(k, d)
        packed = theta[k + k * d:].reshape(k, d * (d + 1) // 2)
        chol = jnp.zeros((k, d, d), dtype=theta.dtype).at[:, rows, cols].set(packed)
        log_pi = logits - jax_logsumexp(logits)

        def component(mu, lj):
            delta = (x - mu).T
            u = jax_solve_triangular(lj, delta, lower=True)
            logdet = jnp.sum(jnp.log(jnp.diagonal(lj)))
            return -0.5 * d * _LOG_2PI - logdet - 0.5 * jnp.sum(u * u, axis=0)

        log_comp = jax.vmap(component)(means, chol)  # (k, n)
        return jax_logsumexp(log_pi[:, None] + log_comp, axis=0)

    def weighted_nll(theta, x, w):
        return -jnp.sum(w * log_marginal(theta, x))

    nll = jax.jit(lambda theta, x: -log_marginal(theta, x))
    nll_grads = jax.jit(lambda theta, x: jax.jacrev(
        lambda t: -log_marginal(t, x))(theta))
    whvp = jax.jit(lambda theta, x, w, v: jax.jvp(
        lambda t: jax.grad(weighted_nll)(t, x, w), (theta,), (v,))[1])
    return nll, nll_grads, whvp


def point_nll(theta: np.ndarray, x: np.ndarray, k: int, d: int) -> np.ndarray:
    nll, _, _ = _compiled(k, d)
    return np.asarray(nll(jnp.asarray(theta), jnp.asarray(x)))


def point_nll_grads(theta: np.ndarray, x: np.ndarray, k: int, d: int) -> np.ndarray:
    _, grads, _ = _compiled(k, d)
    return np.asarray(grads(jnp.asarray(theta), jnp.asarray(x)))


def weighted_hvp(theta: np.ndarray, x: np.ndarray, w: np.ndarray, v: np.ndarray,
                 k: int, d: int) -> np.ndarray:
    # Only rows with nonzero weight matter; pad to shape buckets so jit
    # compilation is reused as the support set grows.
    active = np.flatnonzero(w)
    if active.size == 0:
        return np.zeros_like(np.asarray(v, dtype=np.float64))
    xa = x[active]
    wa = w[active]
    pad = (-len(active)) % _PAD
    if pad:
        xa = np.vstack([xa, np.zeros((pad, x.shape[1]))])
        wa = np.concatenate([wa, np.zeros(pad)])
    _, _, whvp = _compiled(k, d)
    return np.asarray(whvp(jnp.asarray(theta), jnp.asarray(xa), jnp.asarray(wa),
                           jnp.asarray(v, dtype=jnp.float64)))


# ---------------------------------------------------------------------------
# weighted EM


def _log_gaussians(x: np.ndarray, means: np.ndarray, covs: np.ndarray) -> np.ndarray:
    n, d = x.shape
    k = means.shape[0]
    out = np.empty((n, k))
    for j in range(k):
        chol = np.linalg.cholesky(covs[j])
        u = sla.solve_triangular(chol, (x - means[j]).T, lower=True,
                                 check_finite=False)
        out[:, j] = (-0.5 * d * _LOG_2PI - np.log(np.diag(chol)).sum()
                     - 0.5 * (u * u).sum(axis=0))
    return out


def _seed_means(x: np.ndarray, w: np.ndarray, k: int,
                rng: np.random.Generator) -> np.ndarray:
    # D^2 seeding restricted to points with positive weight.
    probs = w / w.sum()
    centers = [x[rng.choice(len(x), p=probs)]]
    for _ in range(k - 1):
        d2 = np.min([((x - c) ** 2).sum(axis=1) for c in centers], axis=0)
        scores = w * d2
        total = scores.sum()
        probs = scores / total if total > 0 else w / w.sum()
        centers.append(x[rng.choice(len(x), p=probs)])
    return np.asarray(centers)


def _weighted_cov(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    mean = (w[:, None] * x).sum(axis=0) / w.sum()
    delta = x - mean
    cov = (w[:, None] * delta).T @ delta / w.sum()
    return cov + COV_FLOOR * np.eye(x.shape[1])


def em_fit(ds, k: int, w: np.ndarray, seed: int | None, budget,
           warm_start=None):
    """Weighted EM for sum_i w_i * (-log p(x_i)).

    Responsibilities are weighted by w_i, covariances get a +1e-6*I floor at
    every update, and a component whose total responsibility collapses is
    reinitialized from the worst-fit point (at most 3 times, then SolverError).
    """
    from .models import ModelParams

    if k < 1:
        raise CoreselectError("k must be >= 1")
    w = np.asarray(w, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise CoreselectError("EM needs total weight > 0")
    active = np.flatnonzero(w)
    if active.size < ds.n:
        return em_fit(ds.subset(active), k, w[active], seed, budget, warm_start)
    x = ds.features
    n, d = x.shape

    if warm_start is not None:
        pi, means, _, covs = unpack(warm_start.theta, k, d)
        covs = covs + COV_FLOOR * np.eye(d)
    else:
        rng = np.random.default_rng(0 if seed is None else seed)
        means = _seed_means(x, w, k, rng)
        covs = np.repeat(_weighted_cov(x, w)[None], k, axis=0)
        pi = np.full(k, 1.0 / k)

    reinits = 0
    prev_nll = np.inf
    converged = False
    for _ in range(budget.max_iters):
        log_n = _log_gaussians(x, means, covs)
        scored = np.log(np.maximum(pi, 1e-300))[None, :] + log_n
        m = scored.max(axis=1)
        lm = m + np.log(np.exp(scored - m[:, None]).sum(axis=1))
        nll = float(-(w @ lm))
        resp = np.exp(scored - lm[:, None])
        gamma = w[:, None] * resp
        mass = gamma.sum(axis=0)

        dead = np.flatnonzero(mass < 1e-12 * max(wsum, 1.0))
        if dead.size:
            reinits += len(dead)
            if reinits > 3:
                raise SolverError(
                    f"{reinits} component reinitializations exceeded the limit "
                    "of 3; too few distinct support points for k components"
                )
            order = np.argsort(lm)  # highest NLL first = lowest log-marginal
            for pos, j in enumerate(dead):
                means[j] = x[order[pos % n]]
                covs[j] = _weighted_cov(x, w)
                pi[j] = 1.0 / k
            pi = pi / pi.sum()
            prev_nll = np.inf
            continue

        pi = mass / mass.sum()
        means = gamma.T @ x / mass[:, None]
        for j in range(k):
            delta = x - means[j]
            covs[j] = (gamma[:, j][:, None] * delta).T @ delta / mass[j] \
                + COV_FLOOR * np.eye(d)

        if abs(prev_nll - nll) <= budget.tol:
            converged = True
            break
        prev_nll = nll

    theta = pack(pi, means, covs)
    diag = "" if converged else "EM hit the iteration budget"
    return ModelParams(theta, "gmm-nll", (k, d), converged=converged,
                       diagnostic=diag)
