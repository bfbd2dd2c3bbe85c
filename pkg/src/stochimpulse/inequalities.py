"""Discrete certificates for the auxiliary inequalities behind the controllability result.

Every "for all eta" statement is turned into a finite eigenproblem.  Forms
that depend on ``eta`` only through the costate at a pivot level ``p`` are
written in the coordinates of :mod:`stochimpulse.forms`, where the backward
Gram operator is block diagonal and subtrees decouple.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import mpmath
import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize, minimize_scalar

from .dynamics import backward_values, forward_values
from .forms import block_sqrt, gram_blocks, initial_readout, operator_matrix
from .hum import DENSE_LIMIT
from .linalg import NonObservableError, conjugate_gradient, power_iteration, threshold_weight, top_eigenvalue
from .spectral import gram_matrix_mp, projector
from .tree import AdaptedField

__all__ = [
    "SpectralIneqReport",
    "ObservabilityReport",
    "InterpolationReport",
    "DecayReport",
    "spectral_constant",
    "spectral_witness",
    "spectral_report",
    "decay_check",
    "observability_constant",
    "interpolation_check",
    "interpolation_sweep",
    "po1_constant",
    "po1_sweep",
    "fit_log_model",
    "report_csv",
]


# spectral inequality


def _window(model, lam):
    if not lam >= model.eigenvalues[0]:
        raise ValueError(f"spectral window below lambda_1 = {model.eigenvalues[0]:g} is empty")
    return len(projector(model, lam).index_set)


def _sigma_min_mp(M, n, dps):
    with mpmath.workdps(dps):
        E, Q = mpmath.eigsy(M[0:n, 0:n])
        i = min(range(n), key=lambda k: E[k])
        return E[i], Q[:, i]


def _stable_sigma(intervals, n, dps=None):
    # raise the working precision until two precisions agree
    d = dps or 40
    prev = None
    while True:
        M = gram_matrix_mp(n, intervals, d)
        s, v = _sigma_min_mp(M, n, d)
        if dps is not None:
            return s, v, M, d
        if s > 0 and prev is not None and abs(s - prev) <= mpmath.mpf(10) ** -14 * s:
            return s, v, M, d
        if d > 1000:
            raise ArithmeticError("smallest eigenvalue of the Gram window is not resolvable")
        prev = s if s > 0 else None
        d *= 2


def spectral_constant(model, gram, lam, dps=None):
    """Tight constant of the spectral inequality on the window ``lambda_j <= lam``.

    Parameters
    ----------
    model : SpectralModel
    gram : ObservationGram
        Only its intervals are used; the window is rebuilt in extended
        precision because ``sigma_min`` underflows double precision quickly.
    lam : float
        Spectral cutoff, at least ``lambda_1``.
    dps : int, optional
        Fixed working precision; by default it is raised until stable.

    Returns
    -------
    float
        ``C(lam) = sigma_min(M_window)^{-1/2}``, so that ``|f| <= C |B* f|``
        for every ``f`` in the window, with equality attained.
    """
    n = _window(model, lam)
    s, *_ = _stable_sigma(gram.intervals, n, dps)
    return float(1 / mpmath.sqrt(s))


def spectral_witness(model, gram, lam, dps=None):
    """Attaining vector of the spectral inequality and its reconstruction error.

    Returns ``(C, f, rel_err)`` with ``rel_err = | |f| - C |B* f| | / |f|``
    evaluated in extended precision.
    """
    n = _window(model, lam)
    s, v, M, d = _stable_sigma(gram.intervals, n, dps)
    with mpmath.workdps(d):
        C = 1 / mpmath.sqrt(s)
        nf = mpmath.sqrt(sum(v[i] ** 2 for i in range(n)))
        nb = mpmath.sqrt((v.T * M[0:n, 0:n] * v)[0])
        rel = abs(nf - C * nb) / nf
    f = np.zeros(model.dim)
    f[:n] = [float(v[i]) for i in range(n)]
    return float(C), f, float(rel)


def fit_log_model(x, y):
    """Ordinary least squares ``y ~ a + b x``; returns ``(a, b, ssr, r2)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    r = y - A @ coef
    ssr = float(r @ r)
    sst = float(((y - y.mean()) ** 2).sum())
    return float(coef[0]), float(coef[1]), ssr, (1.0 - ssr / sst) if sst > 0 else 1.0


@dataclass(frozen=True)
class SpectralIneqReport:
    cutoffs: tuple
    constants: tuple
    fitted_N: float
    ssr_sqrt: float
    ssr_linear: float
    r2_sqrt: float

    @property
    def prefers_sqrt(self):
        return self.ssr_sqrt < self.ssr_linear

    def to_dict(self):
        d = asdict(self)
        d["prefers_sqrt"] = self.prefers_sqrt
        return d

    def rows(self):
        return [(lam, c, math.exp(self.fitted_N * (1 + math.sqrt(lam))), 0.5) for lam, c in zip(self.cutoffs, self.constants)]


def spectral_report(model, gram, cutoffs=None, threads=1):
    """Constants over a ladder of cutoffs and the ``gamma`` model-selection fit.

    ``ln C`` is regressed on ``lam^(1/2)`` and on ``lam``; ``fitted_N`` is the
    one-parameter fit ``ln C = N (1 + lam^(1/2))``.
    """
    if cutoffs is None:
        cutoffs = model.eigenvalues[3:] if model.dim > 4 else model.eigenvalues
    cutoffs = [float(c) for c in cutoffs]
    # the widest window needs the most precision; smaller windows reuse it
    *_, dps = _stable_sigma(gram.intervals, _window(model, max(cutoffs)))

    def one(c):
        return spectral_constant(model, gram, c, dps=dps)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            consts = list(ex.map(one, cutoffs))
    else:
        consts = [one(c) for c in cutoffs]
    lam = np.array(cutoffs)
    y = np.log(consts)
    _, _, ssr_s, r2_s = fit_log_model(np.sqrt(lam), y)
    _, _, ssr_l, _ = fit_log_model(lam, y)
    base = 1.0 + np.sqrt(lam)
    N = float(base @ y / (base @ base))
    return SpectralIneqReport(tuple(cutoffs), tuple(consts), N, ssr_s, ssr_l, r2_s)


# decay


@dataclass(frozen=True)
class DecayReport:
    worst_ratio: float
    violations: int
    trials: int

    @property
    def max_violation(self):
        return max(self.worst_ratio - 1.0, 0.0)

    def to_dict(self):
        d = asdict(self)
        d["max_violation"] = self.max_violation
        return d


def decay_check(model, tree, lam, trials=100, seed=0, tol=1e-12):
    """Fuzz the discrete decay bound for high-frequency terminal data.

    For ``eta`` supported on modes with ``lambda_j > lam`` checks, at every
    level ``k``::

        E|z_k|^2 <= prod_{m >= k} (1 + F_m^2 dt) exp(-2 lam (T - t_k)) E|eta|^2

    Returns
    -------
    DecayReport
        ``worst_ratio`` is the largest left/right ratio seen; a violation is
        a ratio above ``1 + tol``.
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    high = ~projector(model, lam).mask if lam >= model.eigenvalues[0] else np.ones(model.dim, bool)
    if not high.any():
        raise ValueError(f"no modes above lam={lam:g} in the truncation")
    rng = np.random.default_rng(seed)
    K = tree.depth
    factors = [tree.energy_factor(k, K) * math.exp(-2 * lam * (K - k) * tree.dt) for k in range(K + 1)]
    worst, bad = -math.inf, 0
    for _ in range(trials):
        eta = rng.standard_normal((1 << K, model.dim)) * high
        e2 = float(np.mean(np.sum(eta**2, axis=1)))
        v = eta
        for k in range(K, -1, -1):
            if k < K:
                v = backward_values(model, tree, v, k + 1, k)
            ratio = float(np.mean(np.sum(v**2, axis=1))) / (factors[k] * e2)
            worst = max(worst, ratio)
            bad += ratio > 1.0 + tol
    return DecayReport(worst_ratio=worst, violations=bad, trials=trials)


# observability


@dataclass(frozen=True)
class ObservabilityReport:
    time_set: tuple
    constant: float
    method: str

    def to_dict(self):
        return asdict(self)


def _costate_matrix(model, tree, p, k):
    # backward map level p -> level k, orthonormal coordinates
    return operator_matrix(lambda X: backward_values(model, tree, X, p, k), p, model.dim, k)


def _observed_form(model, gram, tree, levels, p):
    J = model.dim
    Q = np.zeros(((1 << p) * J,) * 2)
    for k in levels:
        B = _costate_matrix(model, tree, p, k)
        Q += tree.dt * B.T @ np.kron(np.eye(1 << k), gram.matrix) @ B
    return 0.5 * (Q + Q.T)


def _observed_apply(model, gram, tree, levels, p, x):
    # sum_k dt B_k^T (I (x) M) B_k in orthonormal coordinates, via sweeps
    v = x.reshape(1 << p, model.dim) * 2.0 ** (p / 2)
    out = np.zeros_like(v)
    for k in levels:
        z = backward_values(model, tree, v, p, k) @ gram.matrix
        out += tree.dt * forward_values(model, tree, z, k, p)
    return out.reshape(-1) * 2.0 ** (-p / 2)


def _check_levels(tree, E):
    levels = sorted({int(k) for k in E})
    if not levels:
        raise ValueError("observation time set E is empty")
    if levels[0] < 0 or levels[-1] > tree.depth:
        raise ValueError(f"levels of E must lie in 0..{tree.depth}")
    return tuple(levels)


def observability_constant(model, gram, tree, E, method="auto", seed=0):
    """Smallest ``C`` with ``E|z(0)|^2 <= C sum_{k in E} dt E<z_k, M z_k>`` for all ``eta``.

    Parameters
    ----------
    model, gram, tree
    E : iterable of int
        Levels at which the costate is observed.
    method : {"auto", "full", "dense", "power"}
        ``"full"`` works on the whole terminal space (``2**K J <= 512``).
        ``"dense"`` and ``"power"`` pivot at ``p = max(E)``: both forms depend
        on ``eta`` only through ``z_p``, which ranges over everything, so
        ``C = lambda_max(D Q_E^{-1} D^T)`` with ``D`` the readout
        ``z_p -> z(0)``.  ``"power"`` is matrix-free, with CG inner solves.

    Returns
    -------
    ObservabilityReport

    Raises
    ------
    NonObservableError
        If the observed form is singular on the reachable costates.
    """
    levels = _check_levels(tree, E)
    K, J = tree.depth, model.dim
    p = levels[-1]
    m = (1 << p) * J
    if method == "auto":
        method = "full" if (1 << K) * J <= DENSE_LIMIT else ("dense" if m <= 4096 else "power")
    Dt = initial_readout(model, tree, p)
    if method == "full":
        if (1 << K) * J > 4 * DENSE_LIMIT:
            raise ValueError(f"full method limited to 2^K J <= {4 * DENSE_LIMIT}")
        C = _range_basis(_costate_matrix(model, tree, K, p))
        P = _pull(C, _costate_matrix(model, tree, K, 0))
        Q = np.zeros((C.shape[1],) * 2)
        for k in levels:
            B = _costate_matrix(model, tree, K, k) @ C
            Q += tree.dt * B.T @ np.kron(np.eye(1 << k), gram.matrix) @ B
        val = _gen_max(P, Q)
    elif method == "dense":
        Q = _observed_form(model, gram, tree, levels, p)
        try:
            L = np.linalg.cholesky(Q)
        except np.linalg.LinAlgError as exc:
            raise NonObservableError("observed form is singular on the reachable costates") from exc
        X = sla.solve_triangular(L, Dt, lower=True)
        val = top_eigenvalue(X.T @ X)
    elif method == "power":

        def apply(w):
            x, *_ = conjugate_gradient(lambda v: _observed_apply(model, gram, tree, levels, p, v), Dt @ w, tol=1e-13, max_iters=20 * m)
            return Dt.T @ x

        val = power_iteration(apply, J, tol=1e-12, seed=seed)[0]
    else:
        raise ValueError(f"unknown method {method!r}")
    return ObservabilityReport(time_set=levels, constant=float(val), method=method)


def _range_basis(A):
    # orthonormal basis of (ker A)^perp
    _, sv, Vt = np.linalg.svd(A, full_matrices=False)
    return Vt[sv > sv[0] * 1e-13].T


def _pull(C, A):
    S = A @ C
    return S.T @ S


def _gen_max(P, Q):
    P = 0.5 * (P + P.T)
    Q = 0.5 * (Q + Q.T)
    try:
        return float(sla.eigh(P, Q, eigvals_only=True)[-1])
    except np.linalg.LinAlgError as exc:
        raise NonObservableError("observed form is singular on the reachable costates") from exc


# interpolation


def _level_blocks(model, gram, tree, t_level):
    """Distinct ``(G_i, Q_i)`` pairs at ``t_level``; ``Q_i = G_i^{1/2} M G_i^{1/2}``."""
    G = gram_blocks(model, tree, t_level)
    S = block_sqrt(G)
    Qh = np.einsum("nij,jk,nkl->nil", S, gram.matrix, S)
    keep = [0]
    for i in range(1, G.shape[0]):
        if np.abs(G[i] - G[0]).max() > 1e-14 * np.abs(G[0]).max():
            keep.append(i)
    return [(G[i], 0.5 * (Qh[i] + Qh[i].T)) for i in keep]


def _interp_sup(G, Q, theta, rng, starts=24):
    # maximize xi'G xi / ((xi'Q xi)^(1-theta) (xi'xi)^theta) over the sphere
    J = G.shape[0]

    def neg(x):
        g, q, n = x @ G @ x, x @ Q @ x, x @ x
        val = -(math.log(g) - (1 - theta) * math.log(q) - theta * math.log(n))
        grad = -(2 * G @ x / g - (1 - theta) * 2 * Q @ x / q - theta * 2 * x / n)
        return val, grad

    cands = list(np.linalg.eigh(G)[1].T) + list(np.linalg.eigh(Q)[1].T)
    try:
        cands += list(sla.eigh(G, Q)[1].T)
    except np.linalg.LinAlgError:
        pass
    cands += list(rng.standard_normal((starts, J)))
    best = -math.inf
    for x0 in cands:
        res = minimize(neg, x0 / np.linalg.norm(x0), jac=True, method="BFGS", options={"gtol": 1e-12, "maxiter": 2000})
        best = max(best, -res.fun, -neg(x0)[0])
    return math.exp(best)


@dataclass(frozen=True)
class InterpolationReport:
    t_level: int
    theta: float
    remaining_time: float
    sup_constant: float
    fuzz_max: float
    trials: int
    bound_exponent: float

    @property
    def consistent(self):
        """The fuzzed maximum never exceeds the certified supremum."""
        return self.fuzz_max <= self.sup_constant * (1 + 1e-9)

    def to_dict(self):
        d = asdict(self)
        d["consistent"] = self.consistent
        return d


def interpolation_check(model, gram, tree, t_level, theta, trials=100, seed=0):
    """Smallest constant in the interpolation inequality at level ``t_level``.

    The inequality reads::

        E|z(t)|^2 <= c (E|B* z(t)|^2)^(1 - theta) (E|eta|^2)^theta

    ``sup_constant`` is the supremum over all ``eta``.  The right-hand side
    is jointly concave and homogeneous in the two energies, so the supremum
    is attained on a single level-``t`` atom and becomes a ``J``-dimensional
    optimization, solved by multistart BFGS.  ``fuzz_max`` is the largest
    ratio over random terminal data pushed through the actual backward
    dynamics.

    Returns
    -------
    InterpolationReport
    """
    if not 0 < theta < 1:
        raise ValueError(f"theta must lie in (0, 1), got {theta}")
    if not 0 <= t_level < tree.depth:
        raise ValueError(f"t_level must lie in 0..{tree.depth - 1}")
    rng = np.random.default_rng(seed)
    sup = max(_interp_sup(G, Q, theta, rng) for G, Q in _level_blocks(model, gram, tree, t_level))
    K = tree.depth
    fuzz = 0.0
    for _ in range(trials):
        eta = rng.standard_normal((1 << K, model.dim)) * rng.exponential(1.0, model.dim)
        z = backward_values(model, tree, eta, K, t_level)
        zf = AdaptedField(t_level, z)
        e2 = float(np.mean(np.sum(eta**2, axis=1)))
        obs = float(np.mean(np.sum(z * (z @ gram.matrix), axis=1)))
        fuzz = max(fuzz, zf.norm2() / (obs ** (1 - theta) * e2**theta))
    rem = (K - t_level) * tree.dt
    return InterpolationReport(
        t_level=t_level,
        theta=float(theta),
        remaining_time=rem,
        sup_constant=sup,
        fuzz_max=fuzz,
        trials=trials,
        bound_exponent=1.0 / (theta * rem),
    )


def interpolation_sweep(model, gram, tree, theta, levels=None, trials=20, seed=0):
    """Interpolation constants over levels; fits ``ln c`` against ``1/(theta (T - t))``.

    Returns ``(reports, fit)`` where ``fit = (a, b, ssr, r2)``.
    """
    if levels is None:
        levels = range(tree.depth)
    reps = [interpolation_check(model, gram, tree, k, theta, trials, seed) for k in levels]
    x = [r.bound_exponent for r in reps]
    y = [math.log(r.sup_constant) for r in reps]
    return reps, fit_log_model(x, y)


# approximate observability constant


def po1_constant(model, gram, tree, t_level, epsilon, method="auto"):
    """Smallest ``C`` with ``E|z(t)|^2 <= C E|B* z(t)|^2 + eps E|eta|^2`` for all ``eta``.

    Parameters
    ----------
    method : {"auto", "full", "blocks"}
        ``"blocks"`` solves ``lambda_max(G_i - C Q_i) = eps`` on the distinct
        ``J x J`` atom blocks at ``t_level``; ``"full"`` assembles both forms
        on the whole terminal space.

    Returns
    -------
    float
        Zero when ``eps`` already dominates ``E|z(t)|^2 / E|eta|^2``.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    if not 0 <= t_level <= tree.depth:
        raise ValueError(f"t_level must lie in 0..{tree.depth}")
    K, J = tree.depth, model.dim
    if method == "auto":
        method = "full" if (1 << K) * J <= DENSE_LIMIT else "blocks"
    if method == "full":
        A = _costate_matrix(model, tree, K, t_level)
        P = A.T @ A
        Q = A.T @ np.kron(np.eye(1 << t_level), gram.matrix) @ A
        return threshold_weight(lambda c: top_eigenvalue(P - c * Q), epsilon)
    if method != "blocks":
        raise ValueError(f"unknown method {method!r}")
    blocks = _level_blocks(model, gram, tree, t_level)
    return threshold_weight(lambda c: max(top_eigenvalue(G - c * Q) for G, Q in blocks), epsilon)


def _shape_log(c3, rem, eps, gamma=0.5):
    return c3 * (1 + (1 / rem) ** (gamma / (1 - gamma))) + ((c3 / rem) * np.log(np.e + 1 / eps)) ** gamma


def po1_sweep(model, gram, tree, t_level, epsilons, method="auto", threads=1):
    """Constants over an ``eps`` ladder with the two diagnostic fits.

    Returns a dict with the constants, the OLS fit of ``ln C`` against
    ``(ln(e + 1/eps))^(1/2)``, and the constant ``C3`` that best matches the
    logarithm of ``exp(C3 [1 + 1/(T-t)]) exp([(C3/(T-t)) ln(e + 1/eps)]^(1/2))``.
    """
    eps = np.array([float(e) for e in epsilons])
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            consts = list(ex.map(lambda e: po1_constant(model, gram, tree, t_level, e, method), eps))
    else:
        consts = [po1_constant(model, gram, tree, t_level, e, method) for e in eps]
    consts = np.array(consts)
    rem = (tree.depth - t_level) * tree.dt
    pos = consts > 0
    out = {"t_level": t_level, "epsilons": eps.tolist(), "constants": consts.tolist(), "fit": None, "C3": None}
    if pos.sum() >= 3:
        y = np.log(consts[pos])
        out["fit"] = fit_log_model(np.sqrt(np.log(np.e + 1 / eps[pos])), y)
        res = minimize_scalar(
            lambda c: float(((y - _shape_log(c, rem, eps[pos])) ** 2).sum()), bounds=(1e-8, 1e4), method="bounded"
        )
        out["C3"] = float(res.x)
    out["bounds"] = [float(np.exp(_shape_log(out["C3"], rem, e))) if out["C3"] else math.nan for e in eps]
    order = np.argsort(eps)
    c_sorted = consts[order]
    out["nonincreasing"] = bool(np.all(np.diff(c_sorted) <= 1e-9 * np.maximum(c_sorted[:-1], 1e-300)))
    return out


def report_csv(rows):
    """CSV with columns parameter, constant, bound, fitted_exponent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["parameter", "constant", "bound", "fitted_exponent"])
    for row in rows:
        w.writerow([format(float(x), ".17g") for x in row])
    return buf.getvalue()
