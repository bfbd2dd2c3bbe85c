"""Control synthesis by minimizing the HUM functional over terminal costate data.

For terminal data ``eta`` let ``z`` solve the backward system and let
``zhat`` be the pairing field: ``z`` read at the pairing level and
conditioned on the control's information level.  The functional is::

    J(eta) = l/2 E<zhat, M zhat> + eps/2 E|eta|^2 - E<y0, z(0)>

Its minimizer ``eta*`` yields the impulse ``u = -l B* zhat(eta*)``, which
steers the state to ``y(T) = eps eta*``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import CONVENTIONS, backward_values, forward_values, terminal_state
from .forms import (
    block_apply,
    block_sqrt,
    gram_blocks,
    initial_readout,
    operator_matrix,
)
from .linalg import (
    ConvergenceError,
    NonObservableError,
    conjugate_gradient,
    power_iteration,
    threshold_weight,
    top_eigenvalue,
)
from .tree import AdaptedField, l2_inner

log = logging.getLogger(__name__)

__all__ = [
    "CLASSES",
    "HUMProblem",
    "HUMCertificate",
    "eval_J",
    "grad_J",
    "minimize_J",
    "min_weight",
    "synthesize",
    "dense_system",
    "epsilon_sweep",
    "sweep_csv",
]

CLASSES = ("at-impulse", "paper-restricted")
EPS_FLOOR = 1e-12
DENSE_LIMIT = 512


@dataclass(frozen=True)
class HUMProblem:
    """A HUM synthesis problem on a fixed tree.

    ``weight=None`` means the weight is resolved to :func:`min_weight` at
    synthesis time.
    """

    model: object
    gram: object
    tree: object
    y0: np.ndarray
    epsilon: float
    weight: float | None = None
    measurability: str = "at-impulse"
    convention: str = "adjoint"

    def __post_init__(self):
        y0 = np.array(self.y0, dtype=float).reshape(-1)
        if y0.shape != (self.model.dim,):
            raise ValueError(f"initial state needs {self.model.dim} coefficients, got {y0.shape}")
        if not np.all(np.isfinite(y0)):
            raise ValueError("initial state has non-finite coefficients")
        y0.setflags(write=False)
        object.__setattr__(self, "y0", y0)
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.epsilon < EPS_FLOOR:
            raise ValueError(f"epsilon={self.epsilon:g} below {EPS_FLOOR:g}: the normal equations are too ill-conditioned")
        if self.weight is not None and not self.weight > 0:
            raise ValueError(f"weight l must be positive, got {self.weight}")
        if self.convention not in CONVENTIONS:
            raise ValueError(f"unknown convention {self.convention!r}; choose from {CONVENTIONS}")
        if self.measurability not in CLASSES:
            raise ValueError(f"unknown measurability class {self.measurability!r}; choose from {CLASSES}")
        K, k = self.tree.depth, self.tree.impulse_level
        if self.measurability == "paper-restricted" and K - k > k:
            raise ValueError(
                f"paper-restricted class needs 0 < T_tilde < T <= 2 T_tilde, i.e. K - k_imp <= k_imp; "
                f"got K={K}, k_imp={k}"
            )

    @property
    def pairing_level(self):
        K, k = self.tree.depth, self.tree.impulse_level
        return k if self.convention == "adjoint" else K - k

    @property
    def control_level(self):
        K, k = self.tree.depth, self.tree.impulse_level
        return k if self.measurability == "at-impulse" else K - k

    @property
    def zhat_level(self):
        return min(self.pairing_level, self.control_level)

    @property
    def sign(self):
        return -1.0 if self.convention == "adjoint" else 1.0

    def with_weight(self, l):
        return replace(self, weight=l)


# raw-array kernels; fields are (2**level, J) arrays


def _zhat(pb, x):
    v = backward_values(pb.model, pb.tree, x, pb.tree.depth, pb.pairing_level)
    for _ in range(pb.pairing_level - pb.zhat_level):
        v = 0.5 * (v[0::2] + v[1::2])
    return v


def _zhat_adjoint(pb, w):
    v = np.repeat(w, 1 << (pb.pairing_level - pb.zhat_level), axis=0)
    return forward_values(pb.model, pb.tree, v, pb.pairing_level, pb.tree.depth)


def _hessian(pb, l, x):
    return l * _zhat_adjoint(pb, _zhat(pb, x) @ pb.gram.matrix) + pb.epsilon * x


def _data(pb):
    return terminal_state(pb.model, pb.gram, pb.tree, pb.y0).values


def _check_eta(pb, eta):
    if eta.level != pb.tree.depth or eta.dim != pb.model.dim:
        raise ValueError(f"terminal data must be a level-{pb.tree.depth} field with J={pb.model.dim}")


def _weight(pb):
    if pb.weight is None:
        raise ValueError("weight l is unresolved; call min_weight or pass weight=")
    return pb.weight


def eval_J(problem, eta):
    """Value of the HUM functional at terminal data ``eta``."""
    _check_eta(problem, eta)
    l = _weight(problem)
    zh = AdaptedField(problem.zhat_level, _zhat(problem, eta.values))
    z0 = backward_values(problem.model, problem.tree, eta.values, problem.tree.depth, 0)[0]
    return 0.5 * l * l2_inner(zh, zh, problem.gram) + 0.5 * problem.epsilon * eta.norm2() - float(problem.y0 @ z0)


def grad_J(problem, eta):
    """Gradient of ``J`` with respect to ``E <., .>``.

    Equals ``y(T; 0, l B* zhat) + eps eta - y(T; y0, 0)``: one backward
    sweep and two forward sweeps.
    """
    _check_eta(problem, eta)
    l = _weight(problem)
    return AdaptedField(problem.tree.depth, _hessian(problem, l, eta.values) - _data(problem))


def dense_system(problem):
    """Normal equations ``H eta = b`` in orthonormal coordinates, assembled column by column."""
    l = _weight(problem)
    K, J = problem.tree.depth, problem.model.dim
    H = operator_matrix(lambda X: _hessian_batched(problem, l, X), K, J, K)
    b = _data(problem).reshape(-1) * 2.0 ** (-K / 2)
    return 0.5 * (H + H.T), b


def _hessian_batched(pb, l, X):
    zh = _zhat(pb, X)
    Mz = np.einsum("ij,njm->nim", pb.gram.matrix, zh)
    return l * _zhat_adjoint(pb, Mz) + pb.epsilon * X


def minimize_J(problem, tol=1e-10, max_iters=None, x0=None, method="cg"):
    """Minimize the HUM functional.

    Parameters
    ----------
    problem : HUMProblem
        Must carry a resolved weight.
    tol : float
        Relative residual target for the normal equations
        ``(l Lambda + eps I) eta = y(T; y0, 0)``.
    max_iters : int, optional
        CG iteration cap; defaults to the dimension of the terminal space.
    x0 : AdaptedField, optional
        CG starting point.
    method : {"cg", "pivot"}
        ``"cg"`` runs conjugate gradients on the normal equations.
        ``"pivot"`` eliminates exactly: ``Lambda`` factors through the
        pairing field, whose Gram operator is block diagonal, so the solve
        reduces to one ``J x J`` system per information atom.  Its residual
        is checked against ``tol`` as well.

    Returns
    -------
    AdaptedField
        The minimizer ``eta*`` on level ``K``.

    Raises
    ------
    ConvergenceError
        If the residual target is not met.
    """
    if not tol > 0:
        raise ValueError(f"tol must be positive, got {tol}")
    l = _weight(problem)
    shape = (1 << problem.tree.depth, problem.model.dim)
    b = _data(problem)
    if method == "pivot":
        x = _pivot_solve(problem, l, b)
        rel = _relres(problem, l, x, b)
        for _ in range(3):
            # iterative refinement against the cancellation in (b - l A M w) / eps
            x1 = x + _pivot_solve(problem, l, b - _hessian(problem, l, x))
            rel1 = _relres(problem, l, x1, b)
            if not rel1 < 0.5 * rel:
                break
            x, rel = x1, rel1
        if rel > tol:
            raise ConvergenceError(f"pivot elimination residual {rel:.3e} exceeds tol {tol:.1e}", residual=rel)
        return AdaptedField(problem.tree.depth, x)
    if method != "cg":
        raise ValueError(f"unknown method {method!r}")
    n = shape[0] * shape[1]
    start = None if x0 is None else x0.values.reshape(-1)
    x, it, rel = conjugate_gradient(
        lambda v: _hessian(problem, l, v.reshape(shape)).reshape(-1),
        b.reshape(-1),
        x0=start,
        tol=tol,
        max_iters=max_iters if max_iters is not None else max(n, 50),
    )
    log.debug("CG converged in %d iterations, relres %.3e", it, rel)
    return AdaptedField(problem.tree.depth, x.reshape(shape))


def _relres(pb, l, x, b):
    nb = np.linalg.norm(b)
    r = np.linalg.norm(b - _hessian(pb, l, x))
    return r / nb if nb > 0 else r


def _pivot_solve(pb, l, b):
    # eta = (b - l A M w) / eps with w = A* eta solving (eps + l Gbar M) w = A* b per atom
    p, c = pb.pairing_level, pb.zhat_level
    J = pb.model.dim
    G = gram_blocks(pb.model, pb.tree, p)
    Gbar = G.reshape(1 << c, 1 << (p - c), J, J).mean(axis=1)
    rhs = _zhat(pb, b)
    sysm = pb.epsilon * np.eye(J) + l * Gbar @ pb.gram.matrix
    w = np.linalg.solve(sysm, rhs[:, :, None])[:, :, 0]
    return (b - l * _zhat_adjoint(pb, w @ pb.gram.matrix)) / pb.epsilon


# minimal weight


def _pivot_data(pb):
    """``Y = G^{1/2} D'`` and the blocks of ``G^{1/2}`` at the pairing level."""
    p = pb.pairing_level
    Gs = block_sqrt(gram_blocks(pb.model, pb.tree, p))
    Y = block_apply(Gs, initial_readout(pb.model, pb.tree, p))
    return Gs, Y


def _woodbury_factors(pb, Gs):
    # on each level-q block Q_hat = W W^T with W = r^{-1/2} [s_1 R; ...; s_r R]
    q = pb.zhat_level
    r = 1 << (pb.pairing_level - q)
    J = pb.model.dim
    W = np.einsum("nij,jk->nik", Gs, pb.gram.factor) / math.sqrt(r)
    return W.reshape(1 << q, r * J, J)


def _rho_matrix(pb, Y, W, l):
    # Y^T (eps I + l W W^T)^{-1} Y by the Woodbury identity, blockwise
    eps = pb.epsilon
    J = pb.model.dim
    Yb = Y.reshape(W.shape[0], -1, J)
    S = Y.T @ Y
    if l > 0:
        WY = np.einsum("bmi,bmj->bij", W, Yb)
        WW = np.einsum("bmi,bmj->bij", W, W)
        inner = np.linalg.solve(eps * np.eye(J) + l * WW, WY)
        S = S - l * np.einsum("bki,bkj->ij", WY, inner)
    return 0.5 * (S + S.T) / eps


def _full_pencil(pb):
    K, J = pb.tree.depth, pb.model.dim
    D = operator_matrix(lambda X: backward_values(pb.model, pb.tree, X, K, 0), K, J, 0)
    Z = operator_matrix(lambda X: _zhat(pb, X), K, J, pb.zhat_level)
    P = D.T @ D
    Q = Z.T @ np.kron(np.eye(1 << pb.zhat_level), pb.gram.matrix) @ Z
    return P, Q


def min_weight(problem, method="auto"):
    """Smallest weight ``l`` for which the observability estimate holds.

    The estimate is ``E|z(0)|^2 <= l E<zhat, M zhat> + eps E|eta|^2`` for
    every terminal datum ``eta``.

    Parameters
    ----------
    problem : HUMProblem
    method : {"auto", "full", "reduced", "power"}
        ``"full"`` assembles both quadratic forms on the whole terminal
        space and finds the root of ``lambda_max(P - l Q) = eps`` (small
        trees only).  ``"reduced"`` and ``"power"`` work in
        coordinates at the pairing level, where the condition becomes
        ``lambda_max(Y^T (eps I + l Q)^{-1} Y) <= 1`` for a ``J``-column
        matrix ``Y``; they differ in how the top eigenvalue is obtained.
        ``"auto"`` picks ``"full"`` when ``2**K * J <= 512``.

    Returns
    -------
    float
        ``l_min``; zero when the estimate already holds with ``l = 0``.

    Raises
    ------
    NonObservableError
        When no finite weight works.
    """
    K, J = problem.tree.depth, problem.model.dim
    if method == "auto":
        method = "full" if (1 << K) * J <= DENSE_LIMIT else "reduced"
    eps = problem.epsilon
    if method == "full":
        if (1 << K) * J > 4 * DENSE_LIMIT:
            raise ValueError(f"full method limited to 2^K J <= {4 * DENSE_LIMIT}")
        P, Q = _full_pencil(problem)
        return threshold_weight(lambda l: top_eigenvalue(P - l * Q), eps)
    if method not in ("reduced", "power"):
        raise ValueError(f"unknown min_weight method {method!r}")
    Gs, Y = _pivot_data(problem)
    W = _woodbury_factors(problem, Gs)
    if method == "reduced":

        def rho(l):
            return top_eigenvalue(_rho_matrix(problem, Y, W, l))

    else:

        def rho(l):
            S = _rho_matrix(problem, Y, W, l)
            return power_iteration(lambda v: S @ v, J, tol=1e-13)[0]

    return threshold_weight(rho, 1.0)


# synthesis


@dataclass(frozen=True)
class HUMCertificate:
    """Synthesized control together with the verified inequality chain."""

    eta_star: AdaptedField
    u: AdaptedField
    y_terminal: AdaptedField
    terminal_norm: float
    control_norm: float
    initial_norm: float
    slack: float
    steering_residual: float
    chain_residual: float
    l: float
    l_min: float
    epsilon: float
    convention: str
    measurability: str

    @property
    def eta_norm(self):
        return self.eta_star.norm2()

    def contracts(self, steering_tol=1e-8, slack_tol=1e-10, chain_tol=1e-10):
        """Contract name -> (value, tolerance, passed); only the adjoint convention is contract-bearing."""
        if self.convention != "adjoint":
            return {}
        y2 = self.initial_norm
        out = {
            "steering_residual": (self.steering_residual, steering_tol, self.steering_residual <= steering_tol),
            "certificate_slack": (self.slack, -slack_tol * y2, self.slack >= -slack_tol * y2),
            "certificate_chain": (self.chain_residual, chain_tol, self.chain_residual <= chain_tol),
        }
        if self.l >= self.l_min:
            bound = self.epsilon * y2 + 1e-10
            out["terminal_bound"] = (self.terminal_norm, bound, self.terminal_norm <= bound)
        return out

    def to_dict(self):
        return {
            "eta_star_norm2": self.eta_norm,
            "u_norm2": self.control_norm,
            "yT_norm2": self.terminal_norm,
            "slack": self.slack,
            "steering_residual": self.steering_residual,
            "chain_residual": self.chain_residual,
            "l": self.l,
            "l_min": self.l_min,
            "epsilon": self.epsilon,
            "convention": self.convention,
            "class": self.measurability,
        }


def synthesize(problem, tol=1e-10, max_iters=None, method="auto", solver="pivot"):
    """Build the HUM control and certify it by direct simulation.

    Parameters
    ----------
    problem : HUMProblem
        ``weight=None`` resolves ``l`` to ``min_weight(problem)``.
    tol : float
        Residual target for the normal equations.  The steering residual is
        this residual rescaled by ``|y(T; y0, 0)| / |y(T)|`` and is reported
        separately.
    method : str
        Passed to :func:`min_weight`.
    solver : {"pivot", "cg"}
        Passed to :func:`minimize_J`.

    Returns
    -------
    HUMCertificate
    """
    pb = problem
    try:
        l_min = min_weight(pb, method=method)
    except NonObservableError:
        if pb.weight is None:
            raise
        l_min = math.inf
    l = l_min if pb.weight is None else float(pb.weight)
    J = pb.model.dim
    b = _data(pb)
    if l == 0.0:
        # the estimate holds without control: eta* = y(T; y0, 0) / eps
        eta = AdaptedField(pb.tree.depth, b / pb.epsilon)
        u = AdaptedField.zeros(pb.zhat_level, J)
        inv_l_u = 0.0
    else:
        eta = minimize_J(pb.with_weight(l), tol=tol, max_iters=max_iters, method=solver)
        zh = _zhat(pb, eta.values)
        u = AdaptedField(pb.zhat_level, pb.sign * l * pb.gram.observe(zh))
        inv_l_u = u.norm2() / l
    yT = terminal_state(pb.model, pb.gram, pb.tree, pb.y0, u)
    y2 = float(pb.y0 @ pb.y0)
    yT2 = yT.norm2()
    gap = (yT - pb.epsilon * eta).norm2()
    steering = math.sqrt(gap / yT2) if yT2 > 0 else math.sqrt(gap)
    rhs = inv_l_u + yT2 / pb.epsilon
    if l > 0:
        zh_f = AdaptedField(pb.zhat_level, _zhat(pb, eta.values))
        lhs = l * l2_inner(zh_f, zh_f, pb.gram) + pb.epsilon * eta.norm2()
    else:
        lhs = pb.epsilon * eta.norm2()
    chain = abs(lhs - rhs) / max(abs(lhs), abs(rhs)) if max(abs(lhs), abs(rhs)) > 0 else 0.0
    return HUMCertificate(
        eta_star=eta,
        u=u,
        y_terminal=yT,
        terminal_norm=yT2,
        control_norm=u.norm2(),
        initial_norm=y2,
        slack=y2 - rhs,
        steering_residual=steering,
        chain_residual=chain,
        l=l,
        l_min=l_min,
        epsilon=pb.epsilon,
        convention=pb.convention,
        measurability=pb.measurability,
    )


def epsilon_sweep(problem, epsilons, threads=1, **kwargs):
    """Synthesize at each ``epsilon`` (weight resolved per point); returns certificates in input order."""
    eps_list = [float(e) for e in epsilons]

    def one(e):
        return synthesize(replace(problem, epsilon=e, weight=problem.weight), **kwargs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(one, eps_list))
    return [one(e) for e in eps_list]


def sweep_csv(certificates):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "l", "u_norm2", "yT_norm2", "bound_rhs"])
    for c in certificates:
        row = [c.epsilon, c.l, c.control_norm, c.terminal_norm, c.epsilon * c.initial_norm]
        w.writerow([format(float(x), ".17g") for x in row])
    return buf.getvalue()
