import numpy as np
import pytest

from stochimpulse import build_dirichlet_laplacian_1d, build_tree, gram_matrix


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small():
    """J=4, K=6 system with unit noise and a single control interval."""
    model = build_dirichlet_laplacian_1d(4)
    gram = gram_matrix(model, [(0.2, 0.6)])
    tree = build_tree(6, 0.06, 0.03, 1.0)
    return model, gram, tree
