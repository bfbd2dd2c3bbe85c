"""Truncated eigenbasis of the Dirichlet Laplacian and the observation operator.

All states are stored as coefficient vectors in the orthonormal basis
``e_j(x) = sqrt(2) sin(j pi x)`` of L^2(0, 1).  The control operator
``B = chi_G`` is represented through its Gram matrix ``M[i, j] = int_G e_i e_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import mpmath
import numpy as np
from scipy.special import sindg

__all__ = [
    "SpectralModel",
    "ObservationGram",
    "SpectralProjector",
    "build_dirichlet_laplacian_1d",
    "gram_matrix",
    "gram_matrix_mp",
    "apply_semigroup",
    "project",
    "projector",
]


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SpectralModel:
    """Eigenvalues of ``-A`` truncated to the first ``dim`` modes.

    ``domain_tag`` identifies the eigenfunction family; only
    ``"dirichlet-1d"`` carries closed-form eigenfunctions.
    """

    dim: int
    eigenvalues: np.ndarray
    domain_tag: str = "dirichlet-1d"

    def __post_init__(self):
        lam = _frozen(self.eigenvalues)
        if lam.shape != (self.dim,):
            raise ValueError(f"expected {self.dim} eigenvalues, got shape {lam.shape}")
        if np.any(lam <= 0):
            raise ValueError("eigenvalues of -A must be positive")
        if np.any(np.diff(lam) < 0):
            raise ValueError("eigenvalues must be sorted nondecreasingly")
        object.__setattr__(self, "eigenvalues", lam)

    def eigenfunction(self, j, x):
        """Evaluate ``e_j`` (1-based index) at points ``x``."""
        if self.domain_tag != "dirichlet-1d":
            raise NotImplementedError(f"no closed-form eigenfunctions for {self.domain_tag!r}")
        if not 1 <= j <= self.dim:
            raise IndexError(f"mode {j} outside 1..{self.dim}")
        return np.sqrt(2.0) * np.sin(j * np.pi * np.asarray(x, dtype=float))

    def decay(self, t):
        """Diagonal of ``S(t)``."""
        if t < 0:
            raise ValueError(f"semigroup time must be nonnegative, got {t}")
        return np.exp(-self.eigenvalues * t)

    def to_dict(self):
        return {"J": self.dim, "lambda": self.eigenvalues.tolist(), "domain": self.domain_tag}


def build_dirichlet_laplacian_1d(J):
    """Spectral model of ``A = d^2/dx^2`` on (0, 1) with Dirichlet conditions.

    Parameters
    ----------
    J : int
        Truncation order, ``J >= 1``.

    Returns
    -------
    SpectralModel
        Model with ``lambda_j = (j pi)^2``, ``j = 1..J``.
    """
    if isinstance(J, bool) or int(J) != J or J < 1:
        raise ValueError(f"invalid truncation order J={J!r}; need a positive integer")
    J = int(J)
    j = np.arange(1, J + 1, dtype=float)
    return SpectralModel(dim=J, eigenvalues=(j * np.pi) ** 2)


def _check_intervals(intervals):
    ivs = sorted((float(a), float(b)) for a, b in intervals)
    if not ivs:
        raise ValueError("control region G is empty")
    for a, b in ivs:
        if not (0.0 <= a < b <= 1.0):
            raise ValueError(f"interval ({a}, {b}) is not a nondegenerate subinterval of (0, 1)")
    for (_, b0), (a1, _) in zip(ivs, ivs[1:]):
        if a1 < b0:
            raise ValueError(f"intervals overlap near x={a1}")
    return tuple(ivs)


def _sinpi(x):
    # sin(pi x) with exact zeros at integers
    return sindg(180.0 * x)


@dataclass(frozen=True)
class ObservationGram:
    """Compression of ``chi_G`` to the truncated basis.

    ``matrix`` is the Gram matrix M of ``{chi_G e_j}`` in L^2(G).  ``factor``
    is its symmetric square root R, so that ``B* f = R f`` expresses
    ``chi_G f`` in orthonormal coordinates of the observation space and
    ``B B* = M``.
    """

    intervals: tuple
    matrix: np.ndarray
    factor: np.ndarray = field(repr=False)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def measure(self):
        return sum(b - a for a, b in self.intervals)

    def observe(self, v):
        """``B*`` applied along the last axis of ``v``."""
        return np.asarray(v) @ self.factor.T

    def control(self, u):
        """``B`` applied along the last axis of ``u``."""
        return np.asarray(u) @ self.factor.T

    def to_dict(self):
        return {"G": [list(iv) for iv in self.intervals], "gram": self.matrix.tolist()}


def gram_matrix(model, intervals):
    """Closed-form Gram matrix of ``chi_G`` for a union of intervals.

    Parameters
    ----------
    model : SpectralModel
        Must be the 1-D Dirichlet model.
    intervals : sequence of (a, b)
        Disjoint subintervals of [0, 1] with positive total length.

    Returns
    -------
    ObservationGram
    """
    if model.domain_tag != "dirichlet-1d":
        raise NotImplementedError(f"Gram matrix requires the 1-D Dirichlet model, got {model.domain_tag!r}")
    ivs = _check_intervals(intervals)
    J = model.dim
    idx = np.arange(1, J + 1)
    I, K = np.meshgrid(idx, idx, indexing="ij")
    diff, tot = I - K, I + K
    safe = np.where(diff == 0, 1, diff)

    M = np.zeros((J, J))
    for a, b in ivs:
        off = (_sinpi(diff * b) - _sinpi(diff * a)) / (safe * np.pi)
        off -= (_sinpi(tot * b) - _sinpi(tot * a)) / (tot * np.pi)
        diag = (b - a) - (_sinpi(2 * idx * b) - _sinpi(2 * idx * a)) / (2 * idx * np.pi)
        off[diff == 0] = 0.0
        M += off + np.diag(diag)
    M = 0.5 * (M + M.T)

    w, V = np.linalg.eigh(M)
    R = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    R = 0.5 * (R + R.T)
    return ObservationGram(intervals=ivs, matrix=_frozen(M), factor=_frozen(R))


def gram_matrix_mp(J, intervals, dps=60):
    """Gram matrix in ``mpmath`` precision; used where ``M`` is numerically singular."""
    ivs = _check_intervals(intervals)
    with mpmath.workdps(dps):
        M = mpmath.matrix(J, J)
        pi = mpmath.pi
        for a, b in ivs:
            a, b = mpmath.mpf(a), mpmath.mpf(b)
            for i in range(1, J + 1):
                for k in range(i, J + 1):
                    if i == k:
                        v = (b - a) - (mpmath.sin(2 * i * pi * b) - mpmath.sin(2 * i * pi * a)) / (2 * i * pi)
                    else:
                        d, s = i - k, i + k
                        v = (mpmath.sin(d * pi * b) - mpmath.sin(d * pi * a)) / (d * pi)
                        v -= (mpmath.sin(s * pi * b) - mpmath.sin(s * pi * a)) / (s * pi)
                    M[i - 1, k - 1] += v
                    if i != k:
                        M[k - 1, i - 1] += v
    return M


def apply_semigroup(model, t, v):
    """Return ``S(t) v`` for coefficient vector(s) ``v`` (modes on the last axis)."""
    return np.asarray(v, dtype=float) * model.decay(t)


@dataclass(frozen=True)
class SpectralProjector:
    cutoff: float
    index_set: tuple
    dim: int

    @property
    def mask(self):
        m = np.zeros(self.dim, dtype=bool)
        m[list(self.index_set)] = True
        return m

    def apply(self, v):
        return np.where(self.mask, np.asarray(v, dtype=float), 0.0)

    def complement(self, v):
        return np.where(self.mask, 0.0, np.asarray(v, dtype=float))


def projector(model, cutoff):
    """Projector onto modes with ``lambda_j <= cutoff`` (ties included)."""
    if not cutoff > 0:
        raise ValueError(f"spectral cutoff must be positive, got {cutoff}")
    idx = tuple(int(i) for i in np.flatnonzero(model.eigenvalues <= cutoff))
    return SpectralProjector(cutoff=float(cutoff), index_set=idx, dim=model.dim)


def project(model, cutoff, v):
    """Split ``v`` into its low-frequency and high-frequency parts."""
    P = projector(model, cutoff)
    return P.apply(v), P.complement(v)
