"""Norm-optimal and time-optimal impulse controls.

The control-to-state map ``L: u -> y(T; 0, u)`` is block diagonal in the
control atoms (a control on one information atom only moves the states in
its subtree), so one thin SVD per block gives the whole multiplier path

    u(mu) = -mu (I + mu L*L)^{-1} L* y(T; y0, 0)

in closed form.  The terminal energy along the path is
``|y_perp|^2 + sum_i d_i^2 / (1 + mu s_i^2)^2``, decreasing in ``mu``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .dynamics import backward_values, forward_values, terminal_state
from .hum import CLASSES
from .linalg import NonObservableError, conjugate_gradient
from .tree import MAX_DEPTH, AdaptedField, build_tree, conditional_expectation, lift

__all__ = [
    "NormOptResult",
    "TimeOptResult",
    "norm_optimal",
    "uniqueness_probe",
    "time_optimal",
    "bang_bang_check",
    "scan_csv",
]

def _control_level(tree, measurability):
    if measurability not in CLASSES:
        raise ValueError(f"unknown measurability class {measurability!r}; choose from {CLASSES}")
    K, k = tree.depth, tree.impulse_level
    if measurability == "at-impulse":
        return k
    if K - k > k:
        raise ValueError(
            f"paper-restricted class needs 0 < T_tilde < T <= 2 T_tilde, i.e. K - k_imp <= k_imp; got K={K}, k_imp={k}"
        )
    return K - k

class _ControlMap:
    """Blockwise SVD of the control-to-state map in orthonormal coordinates."""

    def __init__(self, model, gram, tree, y0, q):
        self.model, self.gram, self.tree, self.q = model, gram, tree, q
        K, k, J = tree.depth, tree.impulse_level, model.dim
        X = np.broadcast_to(np.eye(J), (1 << q, J, J))
        X = np.repeat(X, 1 << (k - q), axis=0)
        X = np.einsum("ij,njm->nim", gram.factor, X)
        Y = forward_values(model, tree, X, k, K)
        n = 1 << q
        self.blocks = Y.reshape(n, -1, J) * 2.0 ** ((q - K) / 2)
        self.U, self.s, self.Vt = np.linalg.svd(self.blocks, full_matrices=False)
        yf = terminal_state(model, gram, tree, y0).values.reshape(n, -1) * 2.0 ** (-K / 2)
        self.free = yf
        self.d = np.einsum("bmi,bm->bi", self.U, yf)
        perp = yf - np.einsum("bmi,bi->bm", self.U, self.d)
        self.perp2 = float((perp**2).sum())
        self.free2 = float((yf**2).sum())
        self.rank_tol = self.s.max() * 1e-13 if self.s.size else 0.0

    @property
    def kernel_dim(self):
        return int((self.s <= self.rank_tol).sum())

    def terminal(self, mu):
        live = self.s > self.rank_tol
        t = np.where(live, self.d**2 / (1.0 + mu * self.s**2) ** 2, self.d**2)
        return self.perp2 + float(t.sum())

    def coeffs(self, mu):
        # u = V c in each block
        live = self.s > self.rank_tol
        return np.where(live, -mu * self.s * self.d / (1.0 + mu * self.s**2), 0.0)

    def control_flat(self, mu):
        return np.einsum("bji,bj->bi", self.Vt, self.coeffs(mu))

    def pinv_flat(self):
        live = self.s > self.rank_tol
        c = np.where(live, -self.d / np.where(live, self.s, 1.0), 0.0)
        return np.einsum("bji,bj->bi", self.Vt, c)

    def control_norm(self, mu):
        return float((self.coeffs(mu) ** 2).sum())

    def sup_norm(self):
        """``|u(mu)|^2`` as ``mu -> inf``."""
        return float((self.pinv_flat() ** 2).sum())

    def to_field(self, flat):
        return AdaptedField(self.q, flat.reshape(1 << self.q, -1) * 2.0 ** (self.q / 2))

def _bisect_log(g, lo, hi, iters=200):
    """Root of a decreasing ``g`` between ``lo`` (g > 0) and ``hi`` (g <= 0), on ``log mu``."""
    a, b = math.log(lo), math.log(hi)
    for _ in range(iters):
        if b - a <= 4e-16 * max(1.0, abs(b)):
            break
        m = 0.5 * (a + b)
        if g(math.exp(m)) > 0:
            a = m
        else:
            b = m
    return math.exp(b)

@dataclass(frozen=True)
class NormOptResult:
    u_star: AdaptedField
    value: float
    multiplier: float
    terminal_norm: float
    target: float
    constraint_residual: float
    active: bool
    measurability: str
    kernel_dim: int
    context: tuple = field(repr=False, compare=False, default=())

    def to_dict(self):
        return {
            "value": self.value,
            "multiplier": self.multiplier,
            "terminal_norm": self.terminal_norm,
            "target": self.target,
            "constraint_residual": self.constraint_residual,
            "active": self.active,
            "class": self.measurability,
            "kernel_dim": self.kernel_dim,
        }

def norm_optimal(model, gram, tree, y0, epsilon, measurability="at-impulse"):
    """Minimal-energy impulse that puts the state in the target ball.

    Minimizes ``E|u|^2`` subject to ``E|y(T; y0, u)|^2 <= eps E|y0|^2`` by
    bisection on the multiplier ``mu`` along the closed-form path.

    Parameters
    ----------
    model, gram, tree
    y0 : array_like, shape (J,)
    epsilon : float
        Ball radius relative to ``E|y0|^2``.
    measurability : {"at-impulse", "paper-restricted"}

    Returns
    -------
    NormOptResult

    Raises
    ------
    NonObservableError
        If the part of the free state that no control can reach already
        exceeds the target.
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon}")
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    q = _control_level(tree, measurability)
    cm = _ControlMap(model, gram, tree, y0, q)
    target = epsilon * float(y0 @ y0)
    if cm.free2 <= target:
        mu = 0.0
    else:
        if cm.perp2 >= target:
            raise NonObservableError(
                f"target unreachable: the uncontrollable part of the free state has energy {cm.perp2:.6g} "
                f">= eps E|y0|^2 = {target:.6g}"
            )
        g = lambda m: cm.terminal(m) - target  # noqa: E731
        hi = 1.0
        while g(hi) > 0:
            hi *= 10.0
        lo = hi / 10.0
        while g(lo) <= 0 and lo > 1e-300:
            lo /= 10.0
        mu = _bisect_log(g, lo, hi)
    u = cm.to_field(cm.control_flat(mu)) if mu > 0 else AdaptedField.zeros(q, model.dim)
    yT = terminal_state(model, gram, tree, y0, u).norm2()
    return NormOptResult(
        u_star=u,
        value=u.norm2(),
        multiplier=mu,
        terminal_norm=yT,
        target=target,
        constraint_residual=yT - target,
        active=mu > 0,
        measurability=measurability,
        kernel_dim=cm.kernel_dim,
        context=(model, gram, tree, y0, float(epsilon)),
    )

def _matrix_free_solve(model, gram, tree, y0, q, target, lo, hi, tol=1e-13):
    # independent route: CG on (I + mu L*L) u = -mu L* y_free with sweeps, bisection on mu
    K, k, J = tree.depth, tree.impulse_level, model.dim
    yf = terminal_state(model, gram, tree, y0).values
    shape = (1 << q, J)

    def Lop(u):
        return terminal_state(model, gram, tree, None, AdaptedField(q, u.reshape(shape))).values

    def Ladj(y):
        z = backward_values(model, tree, y, K, k)
        return gram.observe(conditional_expectation(AdaptedField(k, z), q).values)

    Ly = Ladj(yf).reshape(-1)

    def solve(mu):
        x, *_ = conjugate_gradient(lambda v: v + mu * Ladj(Lop(v)).reshape(-1), -mu * Ly, tol=tol, max_iters=10_000)
        return x

    def g(mu):
        y = yf + Lop(solve(mu))
        return float(np.mean(np.sum(y**2, axis=1))) - target

    mu = _bisect_log(g, lo, hi, iters=120)
    return AdaptedField(q, solve(mu).reshape(shape)), mu

def uniqueness_probe(result, perturbations=4, seed=0):
    """Re-solve a norm-optimal problem independently and probe strict convexity.

    Returns a dict with ``max_deviation`` (largest ``E|u_i - u*|^2``^(1/2)
    over independent solves), ``parallelogram`` (the residual
    ``2(|u|^2 + |v|^2) - |u + v|^2`` on ``(u*, u*)``), and the kernel probe
    ``equal_norm_admissible`` (count of admissible controls found on the
    sphere ``|u| = |u*|`` other than ``u*``; zero certifies the
    construction impossible).
    """
    model, gram, tree, y0, eps = result.context
    u = result.u_star
    q = u.level
    rng = np.random.default_rng(seed)
    devs = []
    if result.active:
        mu = result.multiplier
        for _ in range(perturbations):
            # perturbed bracket around the multiplier
            lo = mu * math.exp(-rng.uniform(0.5, 3.0))
            hi = mu * math.exp(rng.uniform(0.5, 3.0))
            v, _ = _matrix_free_solve(model, gram, tree, y0, q, result.target, lo, hi)
            devs.append(math.sqrt((v - u).norm2()))
    a = u.norm2()
    para = 2 * (a + a) - (u + u).norm2()
    found, mid_gain = 0, []
    target = result.target
    for _ in range(max(perturbations, 1) * 8):
        h = AdaptedField(q, rng.standard_normal(u.values.shape))
        hh = h.norm2()
        t = -2 * _inner(u, h) / hh
        if t == 0:
            continue
        v = u + t * h
        if terminal_state(model, gram, tree, y0, v).norm2() <= target * (1 + 1e-12) and t * t * hh > 1e-20 * max(a, 1e-300):
            found += 1
            mid_gain.append(a - (0.5 * (u + v)).norm2())
    return {
        "max_deviation": max(devs) if devs else 0.0,
        "solves": len(devs),
        "parallelogram": para,
        "kernel_dim": result.kernel_dim,
        "equal_norm_admissible": found,
        "midpoint_gains": mid_gain,
    }

def _inner(f, g):
    return float(np.sum(f.values * g.values) / f.values.shape[0])

# time optimal

@dataclass(frozen=True)
class TimeOptResult:
    T_star: float
    K_star: int | None
    u_star: AdaptedField | None
    budget: float
    norm_check: float
    proportionality_residual: float
    active: bool
    scan: tuple
    dt: float
    measurability: str
    note: str = ""
    context: tuple = field(repr=False, compare=False, default=())

    @property
    def feasible(self):
        return math.isfinite(self.T_star)

    def to_dict(self):
        return {
            "T_star": self.T_star if self.feasible else None,
            "status": "ok" if self.feasible else "inf ∅",
            "K_star": self.K_star,
            "M": self.budget,
            "u_norm2": self.u_star.norm2() if self.u_star is not None else None,
            "norm_check": self.norm_check,
            "proportionality_residual": self.proportionality_residual,
            "active": self.active,
            "dt": self.dt,
            "class": self.measurability,
            "note": self.note,
        }

def _N(model, gram, y0, eps, T_tilde, K, dt, noise, measurability):
    tree = build_tree(K, K * dt, T_tilde, noise)
    try:
        return norm_optimal(model, gram, tree, y0, eps, measurability).value, tree
    except NonObservableError:
        return math.inf, tree

def time_optimal(model, gram, y0, epsilon, M, T_tilde, T_grid, dt=None, noise=0.0, measurability="at-impulse", threads=1):
    """Earliest horizon at which a control of energy at most ``M^2`` reaches the target ball.

    Parameters
    ----------
    model, gram
    y0 : array_like
    epsilon : float
        Ball radius relative to ``E|y0|^2``.
    M : float
        Control budget, ``E|u|^2 <= M^2``.
    T_tilde : float
        Impulse time.
    T_grid : sequence of float
        Increasing horizons ``> T_tilde``.
    dt : float, optional
        Common step; defaults to ``T_tilde`` divided by the largest power of
        two keeping every tree within the depth limit.  Each horizon gets its
        own tree with ``K = T / dt`` steps.
    noise : float
        Constant noise coefficient.

    Returns
    -------
    TimeOptResult
        ``T_star`` is ``inf`` (reported as ``"inf ∅"``) when no grid
        horizon is admissible.  ``u_star`` is the point of the multiplier
        path at ``T_star`` with ``E|u|^2 = M^2``; when even the
        terminal-energy minimizer costs less than ``M^2`` the budget is
        inactive and that minimizer is returned instead.
    """
    if not M > 0:
        raise ValueError(f"budget M must be positive, got {M}")
    grid = [float(T) for T in T_grid]
    if not grid or any(b <= a for a, b in zip(grid, grid[1:])) or grid[0] <= T_tilde:
        raise ValueError("T_grid must be increasing with all horizons after T_tilde")
    if dt is None:
        dt = T_tilde
        while grid[-1] / (dt / 2) <= MAX_DEPTH + 1e-9:
            dt /= 2
    notes = []
    lattice = []
    for T in grid:
        K = T / dt
        if abs(K - round(K)) > 1e-9 * K:
            notes.append(f"T={T:g} is not a multiple of dt={dt:g}; rounded to K={round(K)}")
        lattice.append(int(round(K)))
    k_imp = T_tilde / dt
    if abs(k_imp - round(k_imp)) > 1e-9 * max(k_imp, 1):
        raise ValueError(f"T_tilde={T_tilde} is not a multiple of dt={dt}")
    k_imp = int(round(k_imp))
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    M2 = M * M

    cache = {}

    def N_of(K):
        if K not in cache:
            cache[K] = _N(model, gram, y0, epsilon, T_tilde, K, dt, noise, measurability)[0]
        return cache[K]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            vals = list(ex.map(N_of, lattice))
    else:
        vals = [N_of(K) for K in lattice]
    rows = [(K * dt, v, v <= M2, False) for K, v in zip(lattice, vals)]
    first = next((i for i, v in enumerate(vals) if v <= M2), None)
    if first is None:
        return TimeOptResult(
            T_star=math.inf, K_star=None, u_star=None, budget=M, norm_check=math.nan,
            proportionality_residual=math.nan, active=False, scan=tuple(rows), dt=dt,
            measurability=measurability, note="; ".join(notes + ["no admissible horizon in the grid"]),
        )
    lo = lattice[first - 1] if first > 0 else k_imp
    hi = lattice[first]
    while hi - lo > 1:
        mid = (lo + hi) // 2
        v = N_of(mid)
        rows.append((mid * dt, v, v <= M2, True))
        if v <= M2:
            hi = mid
        else:
            lo = mid
    tree = build_tree(hi, hi * dt, T_tilde, noise)
    u, active = _budget_control(model, gram, tree, y0, epsilon, M2, measurability)
    if not active:
        notes.append("budget inactive at T*: the terminal-energy minimizer costs less than M^2")
    rows.sort(key=lambda r: (r[0], r[3]))
    res = TimeOptResult(
        T_star=hi * dt, K_star=hi, u_star=u, budget=M, norm_check=abs(u.norm2() - M2),
        proportionality_residual=math.nan, active=active, scan=tuple(rows), dt=dt,
        measurability=measurability, note="; ".join(notes), context=(model, gram, tree, y0, float(epsilon)),
    )
    prop = bang_bang_check(model, gram, tree, res, trials=0)
    return replace(res, proportionality_residual=prop.get("proportionality_adjoint", math.nan))

def _budget_control(model, gram, tree, y0, eps, M2, measurability):
    q = _control_level(tree, measurability)
    cm = _ControlMap(model, gram, tree, y0, q)
    if cm.sup_norm() <= M2:
        return cm.to_field(cm.pinv_flat()), False
    g = lambda m: M2 - cm.control_norm(m)  # noqa: E731  (decreasing in mu)
    hi = 1.0
    while g(hi) > 0:
        hi *= 10.0
    lo = hi / 10.0
    while g(lo) <= 0 and lo > 1e-300:
        lo /= 10.0
    # land on the side with |u|^2 <= M^2 within rounding, then pick the closer end
    a, b = math.log(lo), math.log(hi)
    for _ in range(200):
        if b - a <= 1e-16 * max(1.0, abs(b)):
            break
        m = 0.5 * (a + b)
        if g(math.exp(m)) > 0:
            a = m
        else:
            b = m
    mu = min((math.exp(a), math.exp(b)), key=lambda m: abs(g(m)))
    return cm.to_field(cm.control_flat(mu)), True

def bang_bang_check(model, gram, tree, result, trials=100, seed=0, u=None, tol=1e-12):
    """Verify the structure of a time-optimal control at ``T*``.

    With ``eta = y(T*; y0, u*)`` and the pairing field
    ``p = -B* E[z(T_imp; eta) | control atom]`` checks

    (a) ``|E|u*|^2 - M^2| <= 1e-7 M^2``;
    (b) ``u*`` lies on the ray of ``p`` (relative residual ``<= 1e-6``); the
        residual for the mirrored pairing level is reported as well;
    (c) ``E<p, u*> >= E<p, u>`` for ``trials`` fuzzed ``u`` with
        ``E|u|^2 <= M^2``.

    ``u`` overrides the control under test.  Returns a dict; when
    ``eta = 0`` the checks are skipped with ``skipped`` set.
    """
    u = result.u_star if u is None else u
    y0 = result.context[3]
    M2 = result.budget**2
    K, k = tree.depth, tree.impulse_level
    q = u.level
    eta = terminal_state(model, gram, tree, y0, u)
    if eta.norm2() == 0.0:
        return {"skipped": "terminal state is zero; the pairing field vanishes"}
    zk = AdaptedField(k, backward_values(model, tree, eta.values, K, k))
    p = -AdaptedField(q, gram.observe(conditional_expectation(zk, q).values))
    out = {
        "norm_gap": abs(u.norm2() - M2),
        "norm_ok": abs(u.norm2() - M2) <= 1e-7 * M2,
        "proportionality_adjoint": _ray_residual(u, p),
    }
    kr = K - k
    zr = AdaptedField(kr, backward_values(model, tree, eta.values, K, kr))
    pr = AdaptedField(kr, gram.observe(zr.values))
    pr = conditional_expectation(pr, q) if kr >= q else lift(pr, q)
    out["proportionality_paper_reversed"] = _ray_residual(u, pr)
    out["proportionality_ok"] = min(out["proportionality_adjoint"], out["proportionality_paper_reversed"]) <= 1e-6
    if trials:
        rng = np.random.default_rng(seed)
        best = _inner(p, u)
        scale = math.sqrt(p.norm2() * M2)
        bad = 0
        worst = -math.inf
        for i in range(trials):
            if i % 2 == 0:
                w = rng.standard_normal(u.values.shape)
            else:
                # near the optimum, where a violation would show first
                w = u.values + rng.standard_normal(u.values.shape) * 10.0 ** -rng.uniform(1, 8) * np.abs(u.values).max()
            v = AdaptedField(q, w)
            v = v * (math.sqrt(M2 / v.norm2()) * rng.uniform(0.0, 1.0) ** (1.0 / u.values.size))
            gap = _inner(p, v) - best
            worst = max(worst, gap / scale)
            bad += gap > tol * scale
        out.update({"maximality_violations": bad, "maximality_trials": trials, "worst_gap": worst})
    return out

def _ray_residual(u, p):
    pp = p.norm2()
    uu = u.norm2()
    if pp == 0 or uu == 0:
        return math.inf
    c = _inner(u, p) / pp
    return math.sqrt((u - c * p).norm2() / uu)

def scan_csv(result):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["T", "N_of_T", "admissible", "refined"])
    for T, N, ok, refined in result.scan:
        w.writerow([format(T, ".17g"), format(N, ".17g") if math.isfinite(N) else "inf", int(ok), int(refined)])
    return buf.getvalue()
