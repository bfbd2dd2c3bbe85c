"""Quadratic forms of the backward map, assembled as matrices.

Coordinates are orthonormal for ``E <., .>``: a level-``k`` field with raw
node values ``x`` has coordinates ``2**(-k/2) x`` (flattened node-major).

Every quantity certified in this package depends on terminal data ``eta``
only through the costate ``w = z(t_p)`` at some pivot level ``p``, plus the
penalty ``E|eta|^2``.  The backward map ``C: eta -> z(t_p)`` satisfies
``C C* = G`` where ``G`` is block diagonal with one ``J x J`` block per
level-``p`` node (subtrees do not interact).  Parametrizing the orthogonal
complement of ``ker C`` by ``eta = C* G^{-1/2} xi`` makes ``E|eta|^2 = |xi|^2``
and ``w = G^{1/2} xi``, which turns every "for all eta" statement into an
eigenproblem of size ``2**p * J`` with bounded entries.
"""

from __future__ import annotations

import numpy as np

from .dynamics import backward_values, forward_values

__all__ = [
    "operator_matrix",
    "gram_blocks",
    "block_sqrt",
    "block_apply",
    "initial_readout",
    "conditioned_gram",
    "conditioned_gram_apply",
]


def operator_matrix(apply, in_level, J, out_level):
    """Matrix of a linear map between level fields in orthonormal coordinates.

    ``apply`` receives raw values with a trailing batch axis,
    shape ``(2**in_level, J, m)``.
    """
    m = (1 << in_level) * J
    X = np.eye(m).reshape(1 << in_level, J, m) * 2.0 ** (in_level / 2)
    Y = np.asarray(apply(X))
    return Y.reshape(-1, m) * 2.0 ** (-out_level / 2)


def gram_blocks(model, tree, p):
    """Blocks of ``G = C C*`` for the backward map from level ``K`` to ``p``.

    Returns an array of shape ``(2**p, J, J)``; injecting ``e_j`` at every
    level-``p`` node at once yields column ``j`` of every block.
    """
    J = model.dim
    X = np.broadcast_to(np.eye(J), (1 << p, J, J)).copy()
    fwd = forward_values(model, tree, X, p, tree.depth)
    G = backward_values(model, tree, fwd, tree.depth, p)
    return 0.5 * (G + np.swapaxes(G, 1, 2))


def block_sqrt(blocks):
    w, V = np.linalg.eigh(blocks)
    w = np.clip(w, 0.0, None)
    S = np.einsum("nij,nj,nkj->nik", V, np.sqrt(w), V)
    return 0.5 * (S + np.swapaxes(S, 1, 2))


def block_apply(blocks, x):
    """Apply block-diagonal ``blocks`` to a flat vector or ``(m, r)`` matrix."""
    n, J, _ = blocks.shape
    if x.ndim == 1:
        return np.einsum("nij,nj->ni", blocks, x.reshape(n, J)).reshape(-1)
    return np.einsum("nij,njr->nir", blocks, x.reshape(n, J, -1)).reshape(n * J, -1)


def initial_readout(model, tree, p):
    """Transpose of the map ``z(t_p) -> z(0)`` as an ``(2**p J, J)`` matrix."""
    J = model.dim
    X = np.eye(J)[None, :, :]
    F = forward_values(model, tree, X, 0, p)
    return F.reshape(-1, J) * 2.0 ** (-p / 2)


def conditioned_gram(M, p, q):
    """Matrix of ``w -> E <E[w|q], M E[w|q]>`` for level-``p`` fields, ``q <= p``."""
    r = 1 << (p - q)
    return np.kron(np.eye(1 << q), np.kron(np.full((r, r), 1.0 / r), M))


def conditioned_gram_apply(M, p, q, x):
    J = M.shape[0]
    r = 1 << (p - q)
    s = x.reshape(1 << q, r, J).sum(axis=1) @ M / r
    return np.repeat(s[:, None, :], r, axis=1).reshape(-1)
