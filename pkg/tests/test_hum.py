import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stochimpulse import (
    AdaptedField,
    HUMProblem,
    NonObservableError,
    backward_evolve,
    build_dirichlet_laplacian_1d,
    build_tree,
    eval_J,
    grad_J,
    gram_matrix,
    min_weight,
    minimize_J,
    synthesize,
)
from stochimpulse.hum import epsilon_sweep, sweep_csv

from oracles import hum_forms as forms
from oracles import l_min as oracle_l_min


def problem(J=2, K=2, T=0.04, Tt=0.02, F=1.0, G=((0.2, 0.6),), y0=None, eps=0.05, **kw):
    model = build_dirichlet_laplacian_1d(J)
    gram = gram_matrix(model, list(G))
    tree = build_tree(K, T, Tt, F)
    y0 = np.array([1.0 / j for j in range(1, J + 1)]) if y0 is None else np.asarray(y0, float)
    return HUMProblem(model, gram, tree, y0, eps, **kw)




def test_zero_initial_state_gives_zero_everything():
    pb = problem(y0=[0.0, 0.0], weight=1.0)
    cert = synthesize(pb)
    assert cert.eta_star.norm2() == 0 and cert.u.norm2() == 0 and cert.terminal_norm == 0


def test_dense_oracle_from_gradient_columns():
    pb = problem(weight=3.0)
    K, J = 2, 2
    n = (1 << K) * J
    zero = AdaptedField.zeros(K, J)
    g0 = grad_J(pb, zero).values.reshape(-1)
    H = np.column_stack(
        [grad_J(pb, AdaptedField(K, np.eye(n)[i].reshape(1 << K, J))).values.reshape(-1) - g0 for i in range(n)]
    )
    # gradient is w.r.t. E<.,.>, so H maps raw values to raw values
    eta = np.linalg.solve(H, -g0)
    for method in ("cg", "pivot"):
        got = minimize_J(pb, method=method).values.reshape(-1)
        assert np.max(np.abs(got - eta)) <= 1e-10 * max(1, np.abs(eta).max())


def test_dense_oracle_from_independent_forms():
    pb = problem(J=3, K=3, T=0.06, Tt=0.04, weight=2.0)
    P, Q, b = forms(pb)
    x = np.linalg.solve(2.0 * Q + pb.epsilon * np.eye(len(b)), b)
    got = minimize_J(pb).values.reshape(-1) * 2.0 ** (-3 / 2)
    assert np.max(np.abs(got - x)) <= 1e-10 * np.abs(x).max()


def test_cg_uniqueness_from_two_starts(rng):
    pb = problem(J=16, K=10, T=0.02, Tt=0.01, G=((0.1, 0.3), (0.6, 0.8)), y0=rng.standard_normal(16), eps=0.1)
    pb = pb.with_weight(min_weight(pb))
    a = minimize_J(pb, method="pivot")
    b = minimize_J(pb, method="cg", x0=AdaptedField(10, rng.standard_normal((1024, 16))), max_iters=20000, tol=1e-9)
    assert math.sqrt((a - b).norm2() / a.norm2()) <= 1e-8


def test_gradient_matches_finite_differences(rng):
    pb = problem(J=3, K=3, T=0.06, Tt=0.04, weight=1.5)
    eta = AdaptedField(3, rng.standard_normal((8, 3)))
    d = AdaptedField(3, rng.standard_normal((8, 3)))
    h = 1e-6
    fd = (eval_J(pb, eta + h * d) - eval_J(pb, eta - h * d)) / (2 * h)
    from stochimpulse import l2_inner

    assert fd == pytest.approx(l2_inner(grad_J(pb, eta), d), rel=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**20), l=st.floats(0.01, 100), eps=st.floats(1e-4, 1.0))
def test_strict_convexity_margin(seed, l, eps):
    pb = problem(J=2, K=3, T=0.06, Tt=0.04, eps=eps, weight=l)
    r = np.random.default_rng(seed)
    e1, e2 = (AdaptedField(3, r.standard_normal((8, 2))) for _ in range(2))
    mid = eval_J(pb, 0.5 * (e1 + e2))
    avg = 0.5 * (eval_J(pb, e1) + eval_J(pb, e2))
    scale = abs(avg) + abs(mid) + 1.0
    assert mid <= avg - eps / 8 * (e1 - e2).norm2() + 1e-12 * scale


def test_single_mode_closed_form():
    pb = problem(J=1, K=2, T=1.0, Tt=0.5, F=0.0, G=((0.0, 1.0),), y0=[1.0], eps=0.1)
    cert = synthesize(pb)
    assert cert.l_min == 0.0 and cert.slack >= 0 and cert.steering_residual <= 1e-10
    assert np.allclose(cert.u.values, 0.0)
    lam = math.pi**2
    l = 4.0
    cert = synthesize(pb.with_weight(l))
    a = math.exp(-lam * 0.5)
    u = -l * a * math.exp(-lam) / (l * a * a + 0.1)
    assert np.allclose(cert.u.values, u, rtol=1e-12)
    assert cert.slack >= 0 and cert.steering_residual <= 1e-10


def test_single_mode_weight_closed_form():
    pb = problem(J=1, K=2, T=0.1, Tt=0.05, F=0.0, G=((0.0, 1.0),), y0=[1.0], eps=0.1)
    lam = math.pi**2
    expect = (math.exp(-2 * lam * 0.1) - 0.1) / math.exp(-2 * lam * 0.05)
    assert expect > 0
    for method in ("full", "reduced", "power"):
        assert min_weight(pb, method) == pytest.approx(expect, rel=1e-10)


def test_large_eps_gives_zero_weight():
    pb = problem(eps=1.0)
    P, _, _ = forms(pb)
    assert pb.epsilon >= np.linalg.eigvalsh(P).max()
    assert min_weight(pb) == 0.0


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("convention", ["adjoint", "paper-reversed"])
def test_min_weight_methods_match_dense_eigensolve(seed, convention):
    r = np.random.default_rng(seed)
    a = float(r.uniform(0, 0.6))
    pb = problem(J=2, K=2, G=((a, a + float(r.uniform(0.1, 0.4))),), eps=0.01, convention=convention)
    oracle = oracle_l_min(pb)
    for method in ("full", "reduced", "power"):
        assert min_weight(pb, method) == pytest.approx(oracle, rel=1e-8, abs=1e-12)


def test_certificate_contracts_hold():
    pb = problem(J=6, K=6, T=0.06, Tt=0.03, eps=0.01)
    cert = synthesize(pb)
    y2 = float(pb.y0 @ pb.y0)
    assert cert.steering_residual <= 1e-8 and cert.chain_residual <= 1e-10
    assert cert.slack >= -1e-10 * y2 and cert.terminal_norm <= 0.01 * y2 + 1e-10
    assert all(ok for *_, ok in cert.contracts().values())
    d = cert.to_dict()
    for key in ("eta_star_norm2", "u_norm2", "yT_norm2", "slack", "steering_residual", "l", "l_min", "convention", "class"):
        assert key in d


def test_steering_identity_and_control_formula():
    pb = problem(J=4, K=6, T=0.06, Tt=0.03, eps=0.01)
    cert = synthesize(pb)
    assert (cert.y_terminal - pb.epsilon * cert.eta_star).norm2() <= 1e-16 * cert.terminal_norm
    z = backward_evolve(pb.model, pb.tree, cert.eta_star).costates[pb.tree.impulse_level]
    assert np.allclose(cert.u.values, -cert.l * pb.gram.observe(z.values), atol=1e-12)


def test_randomness_witness():
    y0 = [1.0, 0.5, -0.3, 0.2]
    noisy = synthesize(problem(J=4, K=6, T=0.06, Tt=0.03, F=1.0, y0=y0, eps=0.01))
    quiet = synthesize(problem(J=4, K=6, T=0.06, Tt=0.03, F=0.0, y0=y0, eps=0.01))
    assert noisy.eta_star.variance() > 0
    assert quiet.eta_star.variance() <= 1e-14


def test_paper_restricted_class():
    pb = problem(J=4, K=6, T=0.06, Tt=0.04, measurability="paper-restricted", eps=0.01)
    cert = synthesize(pb)
    assert cert.u.level == 2 and cert.steering_residual <= 1e-8
    with pytest.raises(ValueError, match="2 T_tilde"):
        problem(J=4, K=6, T=0.06, Tt=0.02, measurability="paper-restricted")


def test_reversed_convention_runs_without_contracts():
    cert = synthesize(problem(J=4, K=6, T=0.06, Tt=0.03, eps=0.01, convention="paper-reversed"))
    assert cert.contracts() == {} and cert.convention == "paper-reversed"


@pytest.mark.parametrize("eps", [0.0, -1.0, 1e-13])
def test_invalid_epsilon_rejected(eps):
    with pytest.raises(ValueError):
        problem(eps=eps)


def test_unresolved_weight_rejected():
    with pytest.raises(ValueError):
        minimize_J(problem())


def test_non_observable_configuration_reported():
    # a 1e-4 wide region sees 16 modes only through a numerically rank-deficient Gram
    pb = problem(J=16, K=2, G=((0.2, 0.2001),), eps=1e-12)
    with pytest.raises(NonObservableError):
        min_weight(pb)
    with pytest.raises(NonObservableError):
        synthesize(pb)


def test_sweep_csv_columns():
    certs = epsilon_sweep(problem(J=4, K=6, T=0.06, Tt=0.03), [0.1, 0.01], threads=2)
    lines = sweep_csv(certs).splitlines()
    assert lines[0] == "epsilon,l,u_norm2,yT_norm2,bound_rhs" and len(lines) == 3
    assert [c.epsilon for c in certs] == [0.1, 0.01]


def test_restricted_class_has_noise_floor():
    # the part of y(T_imp) driven by noise after the control's level is orthogonal to every admissible control
    from stochimpulse.optimal import norm_optimal

    pb = problem(J=6, K=6, T=0.06, Tt=0.04, F=1.0, G=((0.1, 0.3), (0.6, 0.8)), measurability="paper-restricted",
                 y0=[1, -0.5, 0.3, 0.2, -0.1, 0.05], eps=1e-3)
    with pytest.raises(NonObservableError):
        min_weight(pb)
    with pytest.raises(NonObservableError):
        norm_optimal(pb.model, pb.gram, pb.tree, pb.y0, 1e-3, "paper-restricted")
    cert = synthesize(problem(J=6, K=6, T=0.06, Tt=0.04, F=1.0, G=((0.1, 0.3), (0.6, 0.8)),
                              measurability="paper-restricted", y0=[1, -0.5, 0.3, 0.2, -0.1, 0.05], eps=0.05))
    assert math.isfinite(cert.l_min) and cert.terminal_norm <= 0.05 * cert.initial_norm + 1e-10
