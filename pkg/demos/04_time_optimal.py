"""Earliest horizon reachable with a bounded impulse, and the structure of the optimal impulse."""

import numpy as np

from stochimpulse import bang_bang_check, build_dirichlet_laplacian_1d, gram_matrix, time_optimal

model = build_dirichlet_laplacian_1d(4)
gram = gram_matrix(model, [(0.2, 0.6)])
y0 = np.array([1.0, 0.5, -0.3, 0.2])
grid = [0.03, 0.05, 0.07, 0.09, 0.11, 0.13]

## A budget too small for every horizon on the grid
r = time_optimal(model, gram, y0, 0.01, 0.5, 0.02, grid, dt=0.01, noise=1.0)
print("M=0.5:", r.to_dict()["status"])

## A feasible budget: coarse scan, then refinement between grid points
r = time_optimal(model, gram, y0, 0.01, 0.7, 0.02, grid, dt=0.01, noise=1.0)
for T, N, ok, refined in r.scan:
    print(f"T={T:.2f}  N(T)={N:.4f}  {'admissible' if ok else '':10s} {'(refined)' if refined else ''}")
print(f"T* = {r.T_star:.2f}, E|u*|^2 = {r.u_star.norm2():.6f}")

## The optimal impulse spends the whole budget and lines up with the adjoint pairing field
bb = bang_bang_check(model, gram, r.context[2], r, trials=100)
print(f"norm gap {bb['norm_gap']:.1e}, proportionality {bb['proportionality_adjoint']:.1e}, "
      f"maximality violations {bb['maximality_violations']}/{bb['maximality_trials']}")
