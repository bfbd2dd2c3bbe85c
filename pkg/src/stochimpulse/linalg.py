"""Small linear-algebra kernels shared by the synthesis and certification code."""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg as sla

__all__ = [
    "ConvergenceError",
    "NonObservableError",
    "conjugate_gradient",
    "power_iteration",
    "top_eigenvalue",
    "threshold_weight",
]

class ConvergenceError(RuntimeError):
    """An iterative solver ran out of iterations before meeting its tolerance."""

    def __init__(self, message, residual=math.nan, iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations

class NonObservableError(ValueError):
    """The observation cannot see part of the costates that the objective needs."""

def conjugate_gradient(apply, b, x0=None, tol=1e-10, max_iters=5000):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    Stops when the true residual satisfies ``|b - A x| <= tol |b|``.

    Returns
    -------
    x : ndarray
    iterations : int
    relres : float
        Final relative residual.

    Raises
    ------
    ConvergenceError
        If ``max_iters`` is exhausted; the exception carries the final
        relative residual.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply(x)
    p = r.copy()
    rr = r @ r
    target = (tol * bnorm) ** 2
    it = 0
    while True:
        if rr <= target:
            # confirm against the true residual; recursive residuals drift
            r = b - apply(x)
            rr = r @ r
            if rr <= target:
                break
            p = r.copy()
        if it >= max_iters:
            relres = math.sqrt(rr) / bnorm
            raise ConvergenceError(
                f"CG stopped after {it} iterations at relative residual {relres:.3e} (tol {tol:.1e})",
                residual=relres,
                iterations=it,
            )
        Ap = apply(p)
        pAp = p @ Ap
        if pAp <= 0:
            raise ConvergenceError("operator is not positive definite", residual=math.sqrt(rr) / bnorm, iterations=it)
        alpha = rr / pAp
        x += alpha * p
        r -= alpha * Ap
        rr_new = r @ r
        p = r + (rr_new / rr) * p
        rr = rr_new
        it += 1
    return x, it, math.sqrt(rr) / bnorm

def power_iteration(apply, dim, tol=1e-10, max_iters=10_000, restarts=3, seed=0):
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Runs ``restarts`` independent starts and keeps the largest converged
    Rayleigh quotient.

    Returns
    -------
    value : float
    vector : ndarray
    """
    rng = np.random.default_rng(seed)
    best, best_v = -np.inf, None
    for _ in range(restarts):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iters):
            w = apply(v)
            lam_new = float(v @ w)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                lam_new = 0.0
                break
            v_new = w / nw
            if abs(lam_new - lam) <= tol * max(abs(lam_new), np.finfo(float).tiny) and np.linalg.norm(v_new - v) < 1e-6:
                v = v_new
                lam = lam_new
                break
            v, lam = v_new, lam_new
        else:
            raise ConvergenceError(f"power iteration did not converge in {max_iters} steps")
        if lam_new > best:
            best, best_v = lam_new, v
    return best, best_v

def threshold_weight(phi, eps, l_max=1e30):
    """Smallest ``l >= 0`` with ``phi(l) <= eps`` for a nonincreasing ``phi``.

    Raises
    ------
    NonObservableError
        If ``phi`` stays above ``eps`` up to ``l_max``.
    """
    from scipy.optimize import brentq

    if phi(0.0) <= eps:
        return 0.0
    lo, hi = 0.0, 1.0
    while phi(hi) > eps:
        lo, hi = hi, hi * 10.0
        if hi > l_max:
            raise NonObservableError(
                "no finite weight satisfies the observability inequality: part of the "
                "required costate energy is invisible to the control, either outside its region or "
                    "finer than its information level"
            )
    return float(brentq(lambda l: phi(l) - eps, lo, hi, xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=500))

def top_eigenvalue(S):
    """Largest eigenvalue of a dense symmetric matrix."""
    S = 0.5 * (S + S.T)
    n = S.shape[0]
    return float(sla.eigh(S, eigvals_only=True, subset_by_index=[n - 1, n - 1])[0])
