import dataclasses
import math

import numpy as np
import pytest

from stochimpulse import AdaptedField, NonObservableError, build_dirichlet_laplacian_1d, build_tree, gram_matrix, terminal_state
from stochimpulse.optimal import bang_bang_check, norm_optimal, scan_csv, time_optimal, uniqueness_probe

from oracles import norm_optimal_kkt as kkt_oracle

Y0 = np.array([1.0, 0.5, -0.3, 0.2])


def setup(J=4, G=((0.2, 0.6),)):
    model = build_dirichlet_laplacian_1d(J)
    return model, gram_matrix(model, list(G))




def test_free_decay_inside_ball_gives_zero_control():
    model, gram = setup()
    tree = build_tree(6, 0.06, 0.03, 1.0)
    ratio = terminal_state(model, gram, tree, Y0).norm2() / float(Y0 @ Y0)
    r = norm_optimal(model, gram, tree, Y0, ratio * 1.01)
    assert r.value == 0.0 and r.multiplier == 0.0 and not r.active


@pytest.mark.parametrize("F", [0.0, 1.0])
@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-3])
def test_matches_dense_kkt(F, eps):
    model, gram = setup(J=2)
    tree = build_tree(2, 0.04, 0.02, F)
    y0 = np.array([1.0, -0.7])
    r = norm_optimal(model, gram, tree, y0, eps)
    u, N = kkt_oracle(model, gram, tree, y0, eps)
    assert r.value == pytest.approx(N, rel=1e-8)
    assert np.max(np.abs(r.u_star.values.reshape(-1) - u)) <= 1e-8 * max(1.0, np.abs(u).max())
    assert r.constraint_residual <= 1e-9 * r.target


def test_single_mode_closed_form():
    model, gram = setup(J=1, G=((0.0, 1.0),))
    lam = model.eigenvalues[0]
    T, Tt, eps = 0.1, 0.05, 0.01
    tree = build_tree(4, T, Tt, 0.0)
    r = norm_optimal(model, gram, tree, [2.0], eps)
    oracle = (math.exp(-lam * T) * 2.0 - math.sqrt(eps) * 2.0) ** 2 / math.exp(-2 * lam * (T - Tt))
    assert r.value == pytest.approx(oracle, rel=1e-10)


def test_homogeneity_in_initial_state():
    model, gram = setup()
    tree = build_tree(6, 0.06, 0.03, 1.0)
    a = norm_optimal(model, gram, tree, Y0, 0.01).value
    b = norm_optimal(model, gram, tree, 3 * Y0, 0.01).value
    assert b == pytest.approx(9 * a, rel=1e-9)


def test_uniqueness_probe():
    model, gram = setup()
    tree = build_tree(6, 0.06, 0.03, 1.0)
    r = norm_optimal(model, gram, tree, Y0, 0.01)
    probe = uniqueness_probe(r, perturbations=3)
    assert probe["max_deviation"] <= 1e-7 and probe["parallelogram"] == 0.0
    assert all(g > 0 for g in probe["midpoint_gains"])


def test_unreachable_target_reported():
    # an observation operator blind to modes 2..4 cannot steer them
    model, gram = setup()
    P = np.diag([1.0, 0.0, 0.0, 0.0])
    blind = dataclasses.replace(gram, matrix=P, factor=P)
    tree = build_tree(6, 0.06, 0.03, 0.0)
    with pytest.raises(NonObservableError):
        norm_optimal(model, blind, tree, Y0, 1e-8)
    assert norm_optimal(model, blind, tree, [1.0, 0, 0, 0], 1e-8).active


def test_paper_restricted_control_level():
    model, gram = setup()
    tree = build_tree(6, 0.06, 0.04, 1.0)
    r = norm_optimal(model, gram, tree, Y0, 0.01, "paper-restricted")
    assert r.u_star.level == 2 and r.constraint_residual <= 1e-9 * r.target


def tp(M, grid=(0.03, 0.05, 0.07, 0.09, 0.11, 0.13), eps=0.01, **kw):
    model, gram = setup()
    return model, gram, time_optimal(model, gram, Y0, eps, M, 0.02, list(grid), dt=0.01, noise=1.0, **kw)


def test_huge_budget_picks_first_horizon():
    *_, r = tp(1e6)
    assert r.T_star == pytest.approx(0.03) and not r.active


def test_no_admissible_horizon():
    *_, r = tp(0.5)
    assert not r.feasible and r.to_dict()["status"] == "inf ∅" and r.to_dict()["T_star"] is None


def test_budget_between_neighbouring_horizons():
    model, gram = setup()
    grid = [0.05, 0.06]
    n1 = norm_optimal(model, gram, build_tree(5, 0.05, 0.02, 1.0), Y0, 0.01).value
    n2 = norm_optimal(model, gram, build_tree(6, 0.06, 0.02, 1.0), Y0, 0.01).value
    assert n2 < n1
    M = math.sqrt(0.5 * (n1 + n2))
    r = time_optimal(model, gram, Y0, 0.01, M, 0.02, grid, dt=0.01, noise=1.0)
    assert r.T_star == pytest.approx(0.06)


def test_refinement_and_boundary():
    model, gram, r = tp(0.7)
    M2 = 0.49
    scan = {round(T, 12): N for T, N, *_ in r.scan}
    assert scan[round(r.T_star, 12)] <= M2
    assert scan[round(r.T_star - r.dt, 12)] > M2
    assert any(row[3] for row in r.scan)
    assert scan_csv(r).splitlines()[0] == "T,N_of_T,admissible,refined"


def test_free_decay_crossing_time():
    model, gram = setup()
    dt, F = 0.01, 1.0
    y2 = float(Y0 @ Y0)

    def free(T):
        K = round(T / dt)
        return float(np.sum(np.exp(-2 * model.eigenvalues * T) * Y0**2)) * (1 + F * F * dt) ** K

    grid = [0.03 + 0.01 * i for i in range(12)]
    eps = free(0.08) / y2
    oracle = next(T for T in grid if free(T) <= eps * y2 * (1 + 1e-12))
    r = time_optimal(model, gram, Y0, eps, 1e-9, 0.02, grid, dt=dt, noise=F)
    assert r.T_star == pytest.approx(oracle)


def test_bang_bang_checks():
    model, gram, r = tp(0.7)
    tree = r.context[2]
    bb = bang_bang_check(model, gram, tree, r, trials=100)
    assert bb["norm_gap"] <= 1e-7 * 0.49
    assert min(bb["proportionality_adjoint"], bb["proportionality_paper_reversed"]) <= 1e-6
    assert bb["maximality_violations"] == 0
    shrunk = bang_bang_check(model, gram, tree, r, trials=0, u=0.9 * r.u_star)
    assert not shrunk["norm_ok"]


def test_single_mode_proportionality_exact():
    model, gram = setup(J=1, G=((0.1, 0.5),))
    grid = [0.03, 0.04, 0.05, 0.06]
    Ns = [norm_optimal(model, gram, build_tree(round(T / 0.01), T, 0.02, 1.0), [1.0], 0.05).value for T in grid]
    M = math.sqrt(0.5 * (Ns[1] + Ns[2]))
    r = time_optimal(model, gram, [1.0], 0.05, M, 0.02, grid, dt=0.01, noise=1.0)
    bb = bang_bang_check(model, gram, r.context[2], r, trials=20)
    assert r.active and bb["proportionality_adjoint"] <= 1e-12


def test_zero_terminal_skips():
    model, gram = setup()
    *_, r = tp(0.7)
    zero = type(r)(**{**r.__dict__, "context": (model, gram, r.context[2], np.zeros(4), 0.01)})
    out = bang_bang_check(model, gram, r.context[2], zero, u=AdaptedField.zeros(r.u_star.level, 4))
    assert "skipped" in out


@pytest.mark.parametrize("grid", [[0.01, 0.03], [0.05, 0.04], []])
def test_invalid_grid_rejected(grid):
    model, gram = setup()
    with pytest.raises(ValueError):
        time_optimal(model, gram, Y0, 0.01, 1.0, 0.02, grid, dt=0.01)
