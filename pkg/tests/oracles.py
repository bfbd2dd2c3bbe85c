"""Dense reference solvers built only from public sweeps applied to unit vectors."""

import math

import numpy as np
from scipy.optimize import brentq

from stochimpulse import AdaptedField, backward_evolve, conditional_expectation, terminal_state


def hum_forms(pb):
    """Dense ``P`` (eta -> |z(0)|^2), ``Q`` (eta -> E<zhat, M zhat>) and ``b`` in orthonormal coordinates."""
    K, J = pb.tree.depth, pb.model.dim
    n = (1 << K) * J
    kp = pb.tree.impulse_level if pb.convention == "adjoint" else K - pb.tree.impulse_level
    c = min(kp, pb.control_level)
    Z0, Zh = [], []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 2.0 ** (K / 2)
        traj = backward_evolve(pb.model, pb.tree, AdaptedField(K, e.reshape(1 << K, J)))
        Z0.append(traj.initial)
        zh = conditional_expectation(traj.costates[kp], c).values
        Zh.append((zh * 2.0 ** (-c / 2)).reshape(-1))
    Z0, Zh = np.array(Z0).T, np.array(Zh).T
    Mb = np.kron(np.eye(1 << c), pb.gram.matrix)
    return Z0.T @ Z0, Zh.T @ Mb @ Zh, Z0.T @ pb.y0


def hum_minimizer(pb, l):
    """Raw level-K values of the minimizer of the HUM functional with weight ``l``."""
    _, Q, b = hum_forms(pb)
    x = np.linalg.solve(l * Q + pb.epsilon * np.eye(len(b)), b)
    return x * 2.0 ** (pb.tree.depth / 2)


def l_min(pb):
    P, Q, _ = hum_forms(pb)

    def phi(l):
        return np.linalg.eigvalsh(P - l * Q).max() - pb.epsilon

    if phi(0.0) <= 0:
        return 0.0
    hi = 1.0
    while phi(hi) > 0:
        hi *= 10
    return brentq(phi, 0.0, hi, xtol=1e-14, rtol=1e-14)


def norm_optimal_kkt(model, gram, tree, y0, eps):
    """Dense KKT: ``u(mu) = -mu (I + mu L^T L)^{-1} L^T y_free`` at the root of ``|y(T)|^2 = target``.

    Returns raw level-``k_imp`` control values and ``E|u|^2``.
    """
    k, K, J = tree.impulse_level, tree.depth, model.dim
    n = (1 << k) * J
    yf = terminal_state(model, gram, tree, y0).values.reshape(-1) * 2.0 ** (-K / 2)
    cols = []
    for i in range(n):
        e = np.zeros(n)
        e[i] = 2.0 ** (k / 2)
        cols.append(terminal_state(model, gram, tree, None, AdaptedField(k, e.reshape(1 << k, J))).values.reshape(-1))
    L = np.array(cols).T * 2.0 ** (-K / 2)
    target = eps * float(np.dot(y0, y0))
    A = L.T @ L

    def u(mu):
        return -mu * np.linalg.solve(np.eye(n) + mu * A, L.T @ yf)

    def g(lm):
        r = yf + L @ u(math.exp(lm))
        return r @ r - target

    if yf @ yf <= target:
        return np.zeros(n), 0.0
    mu = math.exp(brentq(g, -60, 60, xtol=1e-15))
    x = u(mu)
    return x * 2.0 ** (k / 2), float(x @ x)
