import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochimpulse import (
    AdaptedField,
    backward_evolve,
    build_dirichlet_laplacian_1d,
    build_tree,
    duality_report,
    duality_residual,
    forward_evolve,
    gram_matrix,
    terminal_state,
)
from stochimpulse.dynamics import costate_at, martingale_integrand


def test_uncontrolled_terminal_matches_path_enumeration(small):
    model, gram, tree = small
    y0 = np.array([1.0, -0.5, 0.25, 0.1])
    yT = terminal_state(model, gram, tree, y0).values
    s = tree.noise * tree.sqrt_dt
    lam = model.eigenvalues
    for n, p in enumerate(itertools.product((1.0, -1.0), repeat=tree.depth)):
        oracle = y0 * np.exp(-lam * tree.horizon) * np.prod(1 + s * np.array(p))
        assert np.allclose(yT[n], oracle, rtol=1e-13, atol=0)


def test_free_energy_identity(small):
    model, gram, tree = small
    y0 = np.array([1.0, 0.5, -0.3, 0.2])
    e = terminal_state(model, gram, tree, y0).norm2()
    oracle = np.sum(np.exp(-2 * model.eigenvalues * tree.horizon) * y0**2) * (1 + tree.dt) ** tree.depth
    assert e == pytest.approx(oracle, rel=1e-13)


def test_impulse_adds_control_jump(small):
    model, gram, tree = small
    u = AdaptedField(1, np.array([[1.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    traj = forward_evolve(model, gram, tree, np.zeros(4), u)
    k = tree.impulse_level
    jump = traj.states[k].values - traj.pre_impulse.values
    assert np.allclose(jump[: 1 << (k - 1)], gram.factor[:, 0], atol=1e-15)
    assert np.allclose(traj.terminal.values, terminal_state(model, gram, tree, None, u).values, atol=1e-15)


def test_control_finer_than_impulse_rejected(small):
    model, gram, tree = small
    with pytest.raises(ValueError):
        forward_evolve(model, gram, tree, np.ones(4), AdaptedField.zeros(tree.impulse_level + 1, 4))


def test_backward_is_conditional_mean_of_discounted_exponential(small):
    model, gram, tree = small
    rng = np.random.default_rng(1)
    eta = AdaptedField(tree.depth, rng.standard_normal((1 << tree.depth, 4)))
    z0 = backward_evolve(model, tree, eta).initial
    s = tree.noise * tree.sqrt_dt
    w = np.array([np.prod(1 + s * np.array(p)) for p in itertools.product((1.0, -1.0), repeat=tree.depth)])
    oracle = np.exp(-model.eigenvalues * tree.horizon) * (w[:, None] * eta.values).mean(axis=0)
    assert np.allclose(z0, oracle, rtol=1e-12)
    assert np.allclose(costate_at(model, tree, eta, 3).values, backward_evolve(model, tree, eta).costates[3].values)


def test_martingale_integrand_shape(small):
    model, gram, tree = small
    eta = AdaptedField.constant(tree.depth, np.ones(4))
    Z = martingale_integrand(model, tree, backward_evolve(model, tree, eta))
    assert len(Z) == tree.depth and Z[0].level == 0


def test_duality_exact_on_fuzz(rng):
    model = build_dirichlet_laplacian_1d(6)
    gram = gram_matrix(model, [(0.1, 0.3), (0.6, 0.8)])
    tree = build_tree(8, 0.08, 0.04, 1.5)
    for _ in range(40):
        lvl = int(rng.integers(0, tree.impulse_level + 1))
        u = AdaptedField(lvl, rng.standard_normal((1 << lvl, 6)))
        eta = AdaptedField(8, rng.standard_normal((256, 6)))
        assert duality_residual(model, gram, tree, rng.standard_normal(6), u, eta) <= 1e-12


def test_reversed_convention_reports_both_sides(small):
    model, gram, tree = small
    rng = np.random.default_rng(3)
    eta = AdaptedField(tree.depth, rng.standard_normal((1 << tree.depth, 4)))
    r = duality_report(model, gram, tree, np.ones(4), AdaptedField(0, rng.standard_normal((1, 4))), eta, "paper-reversed")
    assert r.convention == "paper-reversed" and np.isfinite(r.residual)
    with pytest.raises(ValueError):
        duality_report(model, gram, tree, np.ones(4), None, eta, "bogus")


@settings(max_examples=30, deadline=None)
@given(
    a=st.floats(-3, 3),
    b=st.floats(-3, 3),
    F=st.floats(0, 5),
    seed=st.integers(0, 2**16),
)
def test_terminal_state_is_affine(a, b, F, seed):
    model = build_dirichlet_laplacian_1d(3)
    gram = gram_matrix(model, [(0.25, 0.75)])
    tree = build_tree(4, 0.04, 0.02, F)
    r = np.random.default_rng(seed)
    y1, y2 = r.standard_normal(3), r.standard_normal(3)
    u1, u2 = (AdaptedField(2, r.standard_normal((4, 3))) for _ in range(2))
    lhs = terminal_state(model, gram, tree, a * y1 + b * y2, a * u1 + b * u2).values
    rhs = a * terminal_state(model, gram, tree, y1, u1).values + b * terminal_state(model, gram, tree, y2, u2).values
    assert np.allclose(lhs, rhs, atol=1e-12 * (1 + np.abs(rhs).max()))
