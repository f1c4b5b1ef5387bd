"""Stationary mean field games with max-type Hamiltonians under the Cordes condition.

Finite-difference solvers for the coupled HJB/KFP system, subdifferential
selections, Moreau-Yosida regularization and property checks.
"""

from .coupling import KernelCoupling, LocalCoupling, apply_coupling, monotonicity_probe
from .errors import (
    ConfigError,
    ContractViolation,
    DomainError,
    LinearSolverError,
    QPSolverError,
    SolverFailure,
)
from .grid import Grid, HessianField
from .hamiltonian import (
    ControlSet,
    CordesParams,
    DiagonalFamily,
    FunctionFamily,
    IsotropicFamily,
    RotationFamily,
    TabulatedFamily,
    check_cordes,
    eval_hamiltonian,
    moreau_envelope,
    renormalization_gamma,
    subdifferential_vertices,
)
from .config import RunConfig, build_problem, load_config
from .hjb import hjb_stability_probe, solve_hjb, solve_hjb_envelope
from .kfp import SelectionField, check_nonnegativity, comparison_probe, solve_kfp
from .mfg import (
    MfgSolution,
    ProblemSpec,
    SolverOptions,
    SweepResult,
    g_perturbation_study,
    regularization_sweep,
    solve_mfg,
    solve_mfg_regularized,
    uniqueness_experiment,
    verify_vi,
)
from .selection import directional_selection_check, optimize_selection

__version__ = "0.1.0"
