"""Impulse approximate controllability of stochastic heat equations on a binary noise tree."""

from .dynamics import (
    backward_evolve,
    duality_report,
    duality_residual,
    forward_evolve,
    terminal_state,
)
from .hum import HUMCertificate, HUMProblem, epsilon_sweep, eval_J, grad_J, min_weight, minimize_J, synthesize
from .inequalities import (
    decay_check,
    interpolation_check,
    observability_constant,
    po1_constant,
    spectral_constant,
    spectral_report,
)
from .linalg import ConvergenceError, NonObservableError
from .optimal import bang_bang_check, norm_optimal, time_optimal, uniqueness_probe
from .spectral import (
    ObservationGram,
    SpectralModel,
    apply_semigroup,
    build_dirichlet_laplacian_1d,
    gram_matrix,
    project,
    projector,
)
from .tree import (
    AdaptedField,
    NoiseTree,
    build_tree,
    conditional_expectation,
    doleans,
    expectation,
    l2_inner,
    lift,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedField",
    "ConvergenceError",
    "HUMCertificate",
    "HUMProblem",
    "NoiseTree",
    "NonObservableError",
    "ObservationGram",
    "SpectralModel",
    "apply_semigroup",
    "backward_evolve",
    "bang_bang_check",
    "build_dirichlet_laplacian_1d",
    "build_tree",
    "conditional_expectation",
    "decay_check",
    "doleans",
    "duality_report",
    "duality_residual",
    "epsilon_sweep",
    "eval_J",
    "expectation",
    "forward_evolve",
    "grad_J",
    "gram_matrix",
    "interpolation_check",
    "l2_inner",
    "lift",
    "min_weight",
    "minimize_J",
    "norm_optimal",
    "observability_constant",
    "po1_constant",
    "project",
    "projector",
    "spectral_constant",
    "spectral_report",
    "synthesize",
    "terminal_state",
    "time_optimal",
    "uniqueness_probe",
]
