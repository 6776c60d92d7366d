"""Active-set Newton (support reduction) for finite mixture likelihoods.

Maximises ``sum_i c_i log (A p)_i - sum_j p_j`` over ``p >= 0`` where the
weights ``c`` sum to one.  At the optimum ``sum p = 1``, so this is the
mixture MLE over the simplex without an explicit constraint, and
``A.T @ (c / q) - 1`` are the directional derivatives for adding mass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import nnls

from .core_types import NumericalError

ARMIJO = 1e-4
MAX_HALVINGS = 40
MAX_MODEL_CONDITION = 1e10
RIDGE = 1e-12
ROUNDING = 64 * np.finfo(float).eps


@dataclass
class MixtureState:
    p: np.ndarray
    loglik: float
    iterations: int
    trace: list = field(default_factory=list)


def loglik(A, c, p) -> float:
    q = A @ p
    if np.any(q <= 0):
        return -np.inf
    return float(c @ np.log(q))


def directional(A, c, p):
    q = A @ p
    return A.T @ (c / q) - 1.0


def _normalise(p):
    s = p.sum()
    return p / s if s > 0 else p


def _check_monotone(trace, value):
    if trace and value < trace[-1] - 1e-12 * max(1.0, abs(trace[-1])):
        raise NumericalError(f"log-likelihood decreased from {trace[-1]!r} to {value!r}")
    trace.append(value)


def _quadratic_model(A, c, p, S):
    AS = A[:, S]
    q = A @ p
    wq = c / q
    H = AS.T @ (AS * (wq / q)[:, None])
    return H, 2.0 * (AS.T @ wq) - 1.0


def _newton_target(A, c, p, S):
    """Maximiser of the quadratic model at ``p`` over vectors supported on S.

    Returns None when the model has no unconstrained maximiser (singular
    or nearly singular Hessian).
    """
    H, rhs = _quadratic_model(A, c, p, S)
    if np.linalg.cond(H) > MAX_MODEL_CONDITION:
        return None
    return np.linalg.solve(H, rhs)


def _constrained_target(A, c, p, S):
    """Maximiser of the quadratic model over nonnegative vectors on S.

    On the nonnegative orthant the model is bounded even when the Hessian
    is singular; a tiny ridge makes the Cholesky factor exist and the
    problem becomes nonnegative least squares.
    """
    H, rhs = _quadratic_model(A, c, p, S)
    ridge = RIDGE * max(float(np.max(np.diag(H))), 1e-300)
    L = np.linalg.cholesky(H + ridge * np.eye(H.shape[0]))
    y = solve_triangular(L, rhs, lower=True)
    return nnls(L.T, y, maxiter=50 * H.shape[0])[0]


def support_reduction(A, c, p0, tol=1e-10, max_iter=10000, trace=None,
                      prune=1e-14) -> MixtureState:
    """Support reduction with Newton steps on the active set.

    ``p0`` must give a finite log-likelihood.  Candidate columns are the
    columns of ``A``; one is added per iteration when it has a positive
    directional derivative above ``tol``.
    """
    A = np.asarray(A, dtype=float)
    c = np.asarray(c, dtype=float)
    p = _normalise(np.asarray(p0, dtype=float).copy())
    trace = [] if trace is None else trace
    ll = loglik(A, c, p)
    if not np.isfinite(ll):
        raise NumericalError("starting point has zero likelihood for some observation")
    _check_monotone(trace, ll)
    for it in range(1, max_iter + 1):
        d = directional(A, c, p)
        S = p > 0
        slack = np.max(np.abs(d[S])) if S.any() else np.inf
        viol = np.max(d)
        if viol <= tol and slack <= tol:
            return MixtureState(p, ll, it - 1, trace)
        if viol > tol and viol > 0.5 * slack:
            j = int(np.argmax(np.where(S, -np.inf, d)))
            if d[j] > tol:
                S = S.copy()
                S[j] = True
        idx = np.nonzero(S)[0]
        beta = _newton_target(A, c, p, idx)
        if beta is None:
            beta = _constrained_target(A, c, p, idx)
        # support reduction: walk toward beta, dropping coordinates that hit zero
        cur = p[idx].copy()
        while np.any(beta < 0):
            neg = beta < 0
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(neg, cur / (cur - beta), np.inf)
            k = int(np.argmin(lam))
            lam_k = float(np.clip(lam[k], 0.0, 1.0))
            cur = cur + lam_k * (beta - cur)
            cur[k] = 0.0
            keep = cur > 0
            if not keep.any():
                break
            idx, cur = idx[keep], cur[keep]
            beta = _newton_target(A, c, p, idx)
            if beta is None:
                beta = _constrained_target(A, c, p, idx)
        target = np.zeros_like(p)
        target[idx] = np.maximum(beta, 0.0)
        p_new, ll_new = _line_search(A, c, p, target, ll)
        if p_new is None:
            # no ascent along the Newton direction: fall back to an EM step
            p_new = p * (A.T @ (c / (A @ p)))
            p_new = _normalise(p_new)
            ll_new = loglik(A, c, p_new)
            if ll_new < ll:
                raise NumericalError(f"support reduction stalled (max violation {viol:.3e})")
        p_new[p_new < prune * p_new.max()] = 0.0
        p = _normalise(p_new)
        ll_new = loglik(A, c, p)
        _check_monotone(trace, ll_new)
        ll = ll_new
    d = directional(A, c, p)
    raise NumericalError(f"support reduction hit the iteration cap {max_iter} "
                         f"with residual {max(np.max(d), np.max(np.abs(d[p > 0]))):.3e}")


def _objective(A, c, p):
    q = A @ p
    if np.any(q <= 0):
        return -np.inf
    return float(c @ np.log(q)) - float(p.sum())


def _line_search(A, c, p, target, ll):
    base = ll - float(p.sum())
    direction = target - p
    slope = float(directional(A, c, p) @ direction)
    # near the optimum the predicted gain drops below the rounding of the
    # objective; without this allowance the step would be halved to nothing
    noise = ROUNDING * max(1.0, abs(base))
    s = 1.0
    for _ in range(MAX_HALVINGS):
        cand = p + s * direction
        val = _objective(A, c, cand)
        if np.isfinite(val) and val >= base + ARMIJO * s * slope - noise:
            cand = _normalise(np.maximum(cand, 0.0))
            new_ll = loglik(A, c, cand)
            if new_ll >= ll - 1e-15 * max(1.0, abs(ll)):
                return cand, new_ll
        s *= 0.5
    return None, ll
