"""Small shared linear-algebra kernels (internal)."""

from __future__ import annotations

import numpy as np

from .errors import IndefiniteSystemError


def cg(apply_a, b: np.ndarray, tol: float, max_iters: int):
    """Conjugate gradients for SPD operators.

    Returns (x, residual_norms, converged) where residual_norms[i] is the true
    recurrence residual after iteration i and the tolerance is relative to
    ||b||. Raises IndefiniteSystemError when iterates go non-finite.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    r = b.copy()
    p = b.copy()
    rs = float(r @ r)
    b_norm = float(np.linalg.norm(b))
    residual_norms = [float(np.sqrt(rs))]
    if b_norm == 0.0:
        return x, residual_norms, True
    threshold = tol * b_norm
    converged = residual_norms[-1] <= threshold
    for _ in range(max_iters):
        if converged:
            break
        ap = apply_a(p)
        denom = float(p @ ap)
        if not np.isfinite(denom) or denom <= 0:
            if denom == 0.0:
                break
            raise IndefiniteSystemError(
                "CG broke down (p^T A p = %.3e); the operator is not positive "
                "definite. Retry with damping > 0." % denom
            )
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise IndefiniteSystemError(
                "CG produced non-finite iterates; the operator is likely "
                "indefinite. Retry with damping > 0."
            )
        residual_norms.append(float(np.sqrt(rs_new)))
        p = r + (rs_new / rs) * p
        rs = rs_new
        converged = residual_norms[-1] <= threshold
    return x, residual_norms, converged


def solve_psd(a: np.ndarray, b: np.ndarray, jitter: float = 0.0) -> np.ndarray:
    """Cholesky solve with escalating jitter fallback for near-PSD systems."""
    import scipy.linalg as sla

    attempt = jitter
    for _ in range(6):
        try:
            mat = a if attempt == 0 else a + attempt * np.eye(a.shape[0])
            c, low = sla.cho_factor(mat, check_finite=False)
            return sla.cho_solve((c, low), b, check_finite=False)
        except np.linalg.LinAlgError:
            attempt = max(attempt * 10, 1e-12)
        except sla.LinAlgError:  # pragma: no cover - scipy alias
            attempt = max(attempt * 10, 1e-12)
    return np.linalg.solve(a, b)
