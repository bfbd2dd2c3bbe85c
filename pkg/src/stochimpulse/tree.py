"""Binary Bernoulli discretization of a scalar Brownian motion.

Level ``k`` of a depth-``K`` tree has ``2**k`` equally likely nodes.  Node
``i`` at level ``k`` has children ``2i`` (increment ``+sqrt(dt)``) and
``2i + 1`` (increment ``-sqrt(dt)``), so the nodes of a level are ordered
lexicographically by path and a node's descendants at a deeper level form a
contiguous block.  Random variables measurable at level ``k`` are stored as
``(2**k, J)`` arrays.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MAX_DEPTH",
    "NoiseTree",
    "AdaptedField",
    "build_tree",
    "expectation",
    "conditional_expectation",
    "lift",
    "l2_inner",
    "doleans",
]

MAX_DEPTH = 14


@dataclass(frozen=True)
class NoiseTree:
    depth: int
    horizon: float
    impulse_level: int
    noise: np.ndarray

    @property
    def dt(self):
        return self.horizon / self.depth

    @property
    def sqrt_dt(self):
        return math.sqrt(self.dt)

    @property
    def impulse_time(self):
        return self.impulse_level * self.dt

    @property
    def tau(self):
        """Squared sup-norm of the noise coefficient."""
        return float(np.max(self.noise ** 2))

    def time(self, k):
        return k * self.dt

    def nodes(self, k):
        return 1 << k

    def energy_factor(self, a, b):
        """``prod_{k=a}^{b-1} (1 + F_k^2 dt)``, the discrete analog of ``exp(tau (t_b - t_a))``."""
        return float(np.prod(1.0 + self.noise[a:b] ** 2 * self.dt))


def build_tree(K, T, T_tilde, F=0.0):
    """Build a depth-``K`` tree on ``[0, T]`` with impulse time ``T_tilde``.

    Parameters
    ----------
    K : int
        Number of time steps, ``1 <= K <= MAX_DEPTH``.
    T, T_tilde : float
        Horizon and impulse time, ``0 < T_tilde < T``.  ``T_tilde`` must be a
        grid point, i.e. ``K * T_tilde / T`` must be an integer.
    F : float or sequence of float
        Noise coefficient per step (a scalar is broadcast).

    Returns
    -------
    NoiseTree
    """
    if isinstance(K, bool) or int(K) != K or not 1 <= K <= MAX_DEPTH:
        raise ValueError(f"tree depth must be an integer in 1..{MAX_DEPTH}, got {K!r}")
    K = int(K)
    if not 0 < T_tilde < T:
        raise ValueError(f"need 0 < T_tilde < T, got T_tilde={T_tilde}, T={T}")
    ratio = K * T_tilde / T
    k_imp = round(ratio)
    if abs(ratio - k_imp) > 1e-9 * max(1.0, ratio):
        raise ValueError(
            f"impulse time {T_tilde} is not on the grid: K*T_tilde/T = {ratio:g} is not an integer; "
            f"choose T_tilde as a multiple of dt = {T / K:g}"
        )
    F = np.broadcast_to(np.asarray(F, dtype=float), (K,)).copy()
    dt = T / K
    worst = float(np.max(np.abs(F))) * math.sqrt(dt)
    if not worst < 1.0:
        raise ValueError(
            f"noise too large for the tree: max|F|*sqrt(dt) = {worst:.6g} >= 1 makes the "
            "discrete stochastic exponential change sign"
        )
    F.setflags(write=False)
    return NoiseTree(depth=K, horizon=float(T), impulse_level=int(k_imp), noise=F)


@dataclass(frozen=True)
class AdaptedField:
    """Random vector measurable with respect to level ``level`` of the tree."""

    level: int
    values: np.ndarray

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] != 1 << self.level:
            raise ValueError(f"level-{self.level} field needs {1 << self.level} node rows, got shape {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self):
        return self.values.shape[1]

    @classmethod
    def constant(cls, level, v):
        v = np.asarray(v, dtype=float)
        return cls(level, np.broadcast_to(v, (1 << level, v.shape[-1])))

    @classmethod
    def zeros(cls, level, J):
        return cls(level, np.zeros((1 << level, J)))

    def __add__(self, other):
        _same_level(self, other)
        return AdaptedField(self.level, self.values + other.values)

    def __sub__(self, other):
        _same_level(self, other)
        return AdaptedField(self.level, self.values - other.values)

    def __mul__(self, c):
        return AdaptedField(self.level, self.values * float(c))

    __rmul__ = __mul__

    def __neg__(self):
        return AdaptedField(self.level, -self.values)

    def norm2(self):
        """``E |X|^2``."""
        return l2_inner(self, self)

    def variance(self):
        """Summed nodewise variance ``E |X - E X|^2``."""
        return float(np.mean(np.sum((self.values - self.values.mean(axis=0)) ** 2, axis=1)))

    def to_dict(self):
        return {"level": self.level, "J": self.dim, "values": self.values.tolist()}

    @classmethod
    def from_dict(cls, d):
        f = cls(int(d["level"]), np.asarray(d["values"], dtype=float))
        if "J" in d and int(d["J"]) != f.dim:
            raise ValueError(f"declared J={d['J']} but values have {f.dim} columns")
        return f

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node_index", "coeff_index", "value"])
        for i, row in enumerate(self.values):
            for j, x in enumerate(row):
                w.writerow([i, j, format(float(x), ".17g")])
        return buf.getvalue()


def _same_level(f, g):
    if f.level != g.level:
        raise ValueError(f"fields live on different levels ({f.level} vs {g.level})")


def expectation(field):
    """Mean over nodes with uniform weights ``2**-level``."""
    return field.values.sum(axis=0) / field.values.shape[0]


def _halve(v):
    return 0.5 * (v[0::2] + v[1::2])


def conditional_expectation(field, k):
    """Condition a level-``m`` field on level ``k <= m`` by averaging siblings."""
    if k > field.level or k < 0:
        raise ValueError(f"cannot condition a level-{field.level} field on level {k}")
    v = field.values
    for _ in range(field.level - k):
        v = _halve(v)
    return AdaptedField(k, v)


def lift(field, m):
    """View a level-``k`` field as a level-``m`` field (``m >= k``)."""
    if m < field.level:
        raise ValueError(f"cannot lift a level-{field.level} field down to level {m}")
    return AdaptedField(m, np.repeat(field.values, 1 << (m - field.level), axis=0))


def l2_inner(f, g, gram=None):
    """``E <f, g>``, or ``E <f, M g>`` when an observation Gram is supplied."""
    _same_level(f, g)
    gv = g.values if gram is None else g.values @ gram.matrix
    return float(np.sum(f.values * gv) / f.values.shape[0])


def doleans(tree, a, b):
    """Discrete stochastic exponential ``prod_{k=a}^{b-1} (1 + F_k dW_k)`` on level ``b``.

    The value on a level-``b`` node is the product along its path between
    levels ``a`` and ``b``.
    """
    if not 0 <= a <= b <= tree.depth:
        raise ValueError(f"need 0 <= a <= b <= {tree.depth}, got a={a}, b={b}")
    v = np.ones((1 << a, 1))
    for k in range(a, b):
        s = tree.noise[k] * tree.sqrt_dt
        nxt = np.empty((2 * v.shape[0], 1))
        nxt[0::2] = v * (1.0 + s)
        nxt[1::2] = v * (1.0 - s)
        v = nxt
    return AdaptedField(b, v)
