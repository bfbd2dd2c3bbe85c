"""Forward impulse-controlled system and backward adjoint system on the tree.

One forward step maps a level-``k`` node value ``y`` to its children
``S(dt) (1 +/- F_k sqrt(dt)) y``; the impulse ``B u`` is added to the state
at the impulse level after stepping into it.  One backward step is the exact
adjoint of the forward step with respect to ``E <., .>``::

    z_k = S(dt) E[(1 + F_k dW_k) z_{k+1} | node]

so that ``E <y_k, z_k>`` is conserved across uncontrolled steps.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .tree import AdaptedField, conditional_expectation, l2_inner, lift

__all__ = [
    "CONVENTIONS",
    "ForwardTrajectory",
    "BackwardTrajectory",
    "DualityReport",
    "forward_evolve",
    "backward_evolve",
    "terminal_state",
    "costate_at",
    "duality_report",
    "duality_residual",
    "martingale_integrand",
]

CONVENTIONS = ("adjoint", "paper-reversed")


def _as_initial(y0, J):
    if isinstance(y0, AdaptedField):
        if y0.level != 0:
            raise ValueError("initial state must be deterministic (level 0)")
        y0 = y0.values[0]
    y0 = np.asarray(y0, dtype=float).reshape(-1)
    if y0.shape != (J,):
        raise ValueError(f"initial state needs {J} coefficients, got {y0.shape}")
    if not np.all(np.isfinite(y0)):
        raise ValueError("initial state has non-finite coefficients")
    return y0[None, :]


def _modes(decay, v):
    # extra trailing axes of v are batch dimensions
    return decay.reshape(decay.shape + (1,) * (v.ndim - 2))


def _step_forward(v, decay, s):
    d = _modes(decay, v)
    out = np.empty((2 * v.shape[0],) + v.shape[1:])
    out[0::2] = v * ((1.0 + s) * d)
    out[1::2] = v * ((1.0 - s) * d)
    return out


def _step_backward(v, decay, s):
    return (0.5 * (1.0 + s) * v[0::2] + 0.5 * (1.0 - s) * v[1::2]) * _modes(decay, v)


def forward_values(model, tree, v, k_from, k_to):
    """Propagate raw level-``k_from`` node values forward to level ``k_to``."""
    decay = model.decay(tree.dt)
    for k in range(k_from, k_to):
        v = _step_forward(v, decay, tree.noise[k] * tree.sqrt_dt)
    return v


def backward_values(model, tree, v, k_from, k_to):
    """Propagate raw level-``k_from`` costate values backward to level ``k_to``."""
    decay = model.decay(tree.dt)
    for k in range(k_from - 1, k_to - 1, -1):
        v = _step_backward(v, decay, tree.noise[k] * tree.sqrt_dt)
    return v


def _check_control(tree, u):
    if u is None:
        return
    if u.level > tree.impulse_level:
        raise ValueError(
            f"control measurable at level {u.level} cannot act at the impulse level "
            f"{tree.impulse_level}: the post-impulse state would not be adapted"
        )


@dataclass(frozen=True)
class ForwardTrajectory:
    states: tuple
    pre_impulse: AdaptedField
    control: AdaptedField | None

    @property
    def terminal(self):
        return self.states[-1]

    def to_csv(self):
        return _trajectory_csv(self.states)


@dataclass(frozen=True)
class BackwardTrajectory:
    costates: tuple

    @property
    def terminal(self):
        return self.costates[-1]

    @property
    def initial(self):
        return self.costates[0].values[0]

    def to_csv(self):
        return _trajectory_csv(self.costates)


def _trajectory_csv(fields):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["level", "node", "coeff", "value"])
    for f in fields:
        for i, row in enumerate(f.values):
            for j, x in enumerate(row):
                w.writerow([f.level, i, j, format(float(x), ".17g")])
    return buf.getvalue()


def forward_evolve(model, gram, tree, y0, u=None):
    """Solve the forward impulse-controlled system on the tree.

    Parameters
    ----------
    model : SpectralModel
    gram : ObservationGram
    tree : NoiseTree
    y0 : array_like, shape (J,)
        Deterministic initial state.
    u : AdaptedField, optional
        Control in observation coordinates, measurable at a level no finer
        than the impulse level.  It is replicated down to the impulse level
        and enters as the jump ``B u``.

    Returns
    -------
    ForwardTrajectory
    """
    _check_control(tree, u)
    decay = model.decay(tree.dt)
    v = _as_initial(y0, model.dim)
    states = [AdaptedField(0, v)]
    pre = states[0] if tree.impulse_level == 0 else None
    for k in range(tree.depth):
        v = _step_forward(v, decay, tree.noise[k] * tree.sqrt_dt)
        if k + 1 == tree.impulse_level:
            pre = AdaptedField(k + 1, v)
            if u is not None:
                v = v + gram.control(lift(u, k + 1).values)
        states.append(AdaptedField(k + 1, v))
    return ForwardTrajectory(states=tuple(states), pre_impulse=pre, control=u)


def terminal_state(model, gram, tree, y0=None, u=None):
    """``y(T; y0, u)`` without storing the trajectory; ``y0=None`` means zero."""
    _check_control(tree, u)
    k_imp = tree.impulse_level
    if y0 is None:
        v = np.zeros((1 << k_imp, model.dim))
    else:
        v = forward_values(model, tree, _as_initial(y0, model.dim), 0, k_imp)
    if u is not None:
        v = v + gram.control(lift(u, k_imp).values)
    return AdaptedField(tree.depth, forward_values(model, tree, v, k_imp, tree.depth))


def backward_evolve(model, tree, eta):
    """Solve the backward adjoint system with terminal value ``eta``.

    Returns
    -------
    BackwardTrajectory
        ``costates[k]`` is the level-``k`` field ``z(t_k)``.
    """
    if eta.level != tree.depth:
        raise ValueError(f"terminal data must live on level {tree.depth}, got level {eta.level}")
    decay = model.decay(tree.dt)
    v = eta.values
    out = [eta]
    for k in range(tree.depth - 1, -1, -1):
        v = _step_backward(v, decay, tree.noise[k] * tree.sqrt_dt)
        out.append(AdaptedField(k, v))
    return BackwardTrajectory(costates=tuple(reversed(out)))


def costate_at(model, tree, eta, k):
    """``z(t_k; eta)`` without storing the other levels."""
    if eta.level != tree.depth:
        raise ValueError(f"terminal data must live on level {tree.depth}, got level {eta.level}")
    return AdaptedField(k, backward_values(model, tree, eta.values, tree.depth, k))


def martingale_integrand(model, tree, traj):
    """Diagnostic ``Z_k = E[dW_k z_{k+1} | node] / dt`` for ``k < K``.

    Not used by any contract; the backward recursion never needs ``Z``
    explicitly.
    """
    out = []
    for k in range(tree.depth):
        z1 = traj.costates[k + 1].values
        out.append(AdaptedField(k, (z1[0::2] - z1[1::2]) / (2.0 * tree.sqrt_dt)))
    return tuple(out)


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    residual: float
    convention: str

    def to_dict(self):
        return {"lhs": self.lhs, "rhs": self.rhs, "residual": self.residual, "convention": self.convention}


def duality_report(model, gram, tree, y0, u, eta, convention="adjoint"):
    """Evaluate both sides of the forward/backward duality identity.

    Under ``"adjoint"`` the identity is::

        E<y(T), eta> - E<y0, z(0)> = E<u, B* E[z(T_imp) | F_{t_u}]>

    where ``t_u`` is the control's measurability level.  Under
    ``"paper-reversed"`` the sign is flipped and the costate is read at the
    mirrored level ``K - k_imp``; that pairing carries no exactness contract.
    """
    if convention not in CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; choose from {CONVENTIONS}")
    if u is None:
        u = AdaptedField.zeros(0, gram.dim)
    traj = forward_evolve(model, gram, tree, y0, u)
    back = backward_evolve(model, tree, eta)
    yT = traj.terminal
    y0f = traj.states[0]
    t1 = l2_inner(yT, eta)
    t0 = l2_inner(y0f, back.costates[0])
    if convention == "adjoint":
        zhat = conditional_expectation(back.costates[tree.impulse_level], u.level)
        pair = l2_inner(u, AdaptedField(u.level, gram.observe(zhat.values)))
        lhs, rhs = t1 - t0, pair
    else:
        k_p = tree.depth - tree.impulse_level
        z = back.costates[k_p]
        if z.level > u.level:
            z = conditional_expectation(z, u.level)
            uu = u
        else:
            uu = conditional_expectation(u, z.level)
        pair = l2_inner(uu, AdaptedField(z.level, gram.observe(z.values)))
        lhs, rhs = t0 - t1, pair
    scale = (
        np.sqrt(yT.norm2() * eta.norm2())
        + np.sqrt(y0f.norm2() * back.costates[0].norm2())
        + np.sqrt(u.norm2() * _obs_norm2(gram, back.costates[tree.impulse_level]))
    )
    residual = abs(lhs - rhs) / scale if scale > 0 else abs(lhs - rhs)
    return DualityReport(lhs=float(lhs), rhs=float(rhs), residual=float(residual), convention=convention)


def _obs_norm2(gram, f):
    return l2_inner(f, f, gram)


def duality_residual(model, gram, tree, y0, u, eta, convention="adjoint"):
    """Relative residual of the duality identity (see :func:`duality_report`)."""
    return duality_report(model, gram, tree, y0, u, eta, convention).residual
