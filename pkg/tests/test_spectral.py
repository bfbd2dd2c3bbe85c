import math

import numpy as np
import pytest
from scipy.integrate import quad

from stochimpulse import apply_semigroup, build_dirichlet_laplacian_1d, gram_matrix, project, projector
from stochimpulse.spectral import gram_matrix_mp


def test_eigenvalues_are_squared_multiples_of_pi():
    m = build_dirichlet_laplacian_1d(5)
    assert np.allclose(m.eigenvalues, (np.arange(1, 6) * np.pi) ** 2, rtol=1e-15)


@pytest.mark.parametrize("J", [0, -1, 2.5])
def test_invalid_truncation_rejected(J):
    with pytest.raises((ValueError, TypeError)):
        build_dirichlet_laplacian_1d(J)


def test_eigenfunctions_orthonormal_by_quadrature():
    m = build_dirichlet_laplacian_1d(4)
    for i in range(1, 5):
        for j in range(1, 5):
            v, _ = quad(lambda x: m.eigenfunction(i, x) * m.eigenfunction(j, x), 0, 1, limit=200)
            assert v == pytest.approx(float(i == j), abs=1e-12)


@pytest.mark.parametrize("intervals", [[(0.2, 0.6)], [(0.1, 0.3), (0.6, 0.8)], [(0.0, 1.0)]])
def test_gram_matches_quadrature(intervals):
    m = build_dirichlet_laplacian_1d(6)
    g = gram_matrix(m, intervals)
    Q = np.zeros((6, 6))
    for a, b in intervals:
        for i in range(1, 7):
            for j in range(1, 7):
                Q[i - 1, j - 1] += quad(lambda x: m.eigenfunction(i, x) * m.eigenfunction(j, x), a, b, limit=200)[0]
    assert np.max(np.abs(g.matrix - Q)) <= 1e-12


def test_full_domain_gram_is_identity():
    m = build_dirichlet_laplacian_1d(8)
    assert np.allclose(gram_matrix(m, [(0, 1)]).matrix, np.eye(8), atol=1e-14)


def test_gram_agrees_with_high_precision():
    m = build_dirichlet_laplacian_1d(6)
    g = gram_matrix(m, [(0.13, 0.47)])
    mp = np.array(gram_matrix_mp(6, [(0.13, 0.47)]).tolist(), dtype=float)
    assert np.max(np.abs(g.matrix - mp)) <= 1e-14


def test_factor_is_square_root_of_gram():
    m = build_dirichlet_laplacian_1d(5)
    g = gram_matrix(m, [(0.3, 0.7)])
    assert np.allclose(g.factor @ g.factor.T, g.matrix, atol=1e-14)
    assert np.allclose(g.factor, g.factor.T, atol=1e-14)


def test_gram_positive_definite_for_positive_measure():
    m = build_dirichlet_laplacian_1d(4)
    assert np.linalg.eigvalsh(gram_matrix(m, [(0.4, 0.5)]).matrix).min() > 0


@pytest.mark.parametrize("bad", [[(0.5, 0.2)], [(-0.1, 0.3)], [(0.2, 1.2)], [(0.1, 0.4), (0.3, 0.6)], []])
def test_invalid_intervals_rejected(bad):
    with pytest.raises(ValueError):
        gram_matrix(build_dirichlet_laplacian_1d(3), bad)


def test_semigroup_decays_each_mode():
    m = build_dirichlet_laplacian_1d(3)
    v = apply_semigroup(m, 0.1, np.ones(3))
    assert np.allclose(v, [math.exp(-(k * math.pi) ** 2 * 0.1) for k in (1, 2, 3)], rtol=1e-14)


def test_projector_splits_and_includes_ties():
    m = build_dirichlet_laplacian_1d(5)
    lo, hi = project(m, m.eigenvalues[2], np.arange(1.0, 6.0))
    assert np.array_equal(lo, [1, 2, 3, 0, 0]) and np.array_equal(hi, [0, 0, 0, 4, 5])
    assert projector(m, 1.0).index_set == ()
