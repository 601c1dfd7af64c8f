"""pistlab: a numerical laboratory for partially integrable Hamiltonian
systems in partial action-angle coordinates (I, z, phi)."""

from .expr import Expr, parse, evaluate, diff, simplify_fold, free_vars
from .geometry import (ChartSpec, SymplecticCoeffs, VectorFieldSpec,
                       poisson_bracket, hamiltonian_vf_poisson,
                       assemble_omega_matrix, hamiltonian_vf_symplectic_at,
                       involution_check, jacobi_check)
from .dynamics import (State, ModelSpec, Trajectory, IntegratorConfig,
                       wrap_angle, exact_unperturbed_flow, integrate_perturbed,
                       energy_drift)
from .analysis import (DiophantineSpec, SieveResult, PersistenceReport,
                       frequency_map_at, nondegeneracy_rank, diophantine_test,
                       resonance_measure_mc, extract_rotation_vector,
                       persistence_experiment)

__version__ = "0.1.0"

__all__ = [
    "Expr", "parse", "evaluate", "diff", "simplify_fold", "free_vars",
    "ChartSpec", "SymplecticCoeffs", "VectorFieldSpec",
    "poisson_bracket", "hamiltonian_vf_poisson", "assemble_omega_matrix",
    "hamiltonian_vf_symplectic_at", "involution_check", "jacobi_check",
    "State", "ModelSpec", "Trajectory", "IntegratorConfig",
    "wrap_angle", "exact_unperturbed_flow", "integrate_perturbed", "energy_drift",
    "DiophantineSpec", "SieveResult", "PersistenceReport",
    "frequency_map_at", "nondegeneracy_rank", "diophantine_test",
    "resonance_measure_mc", "extract_rotation_vector", "persistence_experiment",
    "__version__",
]
