"""How the impulse cost grows as the target ball shrinks."""

import numpy as np

from stochimpulse import HUMProblem, build_dirichlet_laplacian_1d, build_tree, epsilon_sweep, gram_matrix
from stochimpulse.inequalities import fit_log_model

model = build_dirichlet_laplacian_1d(16)
gram = gram_matrix(model, [(0.1, 0.3), (0.6, 0.8)])
tree = build_tree(10, 0.02, 0.01, 1.0)
problem = HUMProblem(model, gram, tree, 1.0 / np.arange(1, 17), 0.1)

## Sweep eps over six decades; independent points run in parallel
eps = np.logspace(-1, -6, 6)
certs = epsilon_sweep(problem, eps, threads=4)
for c in certs:
    print(f"eps={c.epsilon:8.1e}  l={c.l:9.3f}  E|u|^2={c.control_norm:9.3f}  E|y(T)|^2={c.terminal_norm:.3e}")

## Compare two growth laws for ln E|u|^2
y = np.log([c.control_norm for c in certs])
_, slope, ssr_sqrt, r2 = fit_log_model(np.sqrt(np.log(np.e + 1 / eps)), y)
_, _, ssr_lin, _ = fit_log_model(np.log(1 / eps), y)
print(f"sqrt-log model: R^2={r2:.4f}, SSR={ssr_sqrt:.4f}; log-linear model SSR={ssr_lin:.4f}")

## The preference depends on geometry and horizon; a wider single band over a longer time
gram1 = gram_matrix(model, [(0.2, 0.6)])
tree1 = build_tree(10, 0.05, 0.025, 1.0)
certs1 = epsilon_sweep(HUMProblem(model, gram1, tree1, 1.0 / np.arange(1, 17), 0.1), eps, threads=4)
y1 = np.log([c.control_norm for c in certs1])
print(
    "single band, T=0.05: SSR sqrt-log {:.4f} vs log-linear {:.4f}".format(
        fit_log_model(np.sqrt(np.log(np.e + 1 / eps)), y1)[2], fit_log_model(np.log(1 / eps), y1)[2]
    )
)
