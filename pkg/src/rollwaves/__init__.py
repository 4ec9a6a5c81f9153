"""Viscous approximation of periodic roll-waves.

Builds matched inner/outer approximate solutions of u_t + f(u)_x = g(u)
+ eps u_xx around piecewise-smooth periodic waves with Lax shocks, and
certifies the residual scaling, vanishing-viscosity convergence, Green's
function bounds and Evans-function stability hypotheses numerically.
"""

from . import errors
from .systems import (HyperbolicSystem, burgers_system, saint_venant_system,
                      eigen_decompose, char_speeds, rankine_hugoniot_residual,
                      lax_family, lax_margin, majda_liu_determinant)
from .rollwave import RollWave, build_sawtooth_rollwave, build_dressler_rollwave
from .profile import ShockProfile, solve_profile, profile_residual, decay_rate
from .corrector import (ShockFixingZ, CorrectorSet, eigvec_z_derivative,
                        inner_rhs_h, compute_H_pm, solve_inner_U1,
                        shock_coupling_solve, build_V1, solve_outer_corrector)
from .cutoff import CutoffConfig, smooth_step
from .assembly import (PhiMap, ApproxSolution, stretched_xi, build_phi,
                       assemble_approx_solution, evaluate_u_app,
                       evaluate_u_app_z_frame, residual_q, certify_scaling)
from .viscous import (Grid, Trajectory, resolved_grid, cell_averages,
                      solve_viscous, error_norms, convergence_study)
from .green import (SpeedField, CharCurve, FarFieldKernel, ProjectionSet,
                    evolve_linear_columns, numerical_green,
                    verify_green_bounds, write_green_csv)

__all__ = [
    "errors",
    "HyperbolicSystem", "burgers_system", "saint_venant_system",
    "eigen_decompose", "char_speeds", "rankine_hugoniot_residual",
    "lax_family", "lax_margin", "majda_liu_determinant",
    "RollWave", "build_sawtooth_rollwave", "build_dressler_rollwave",
    "ShockProfile", "solve_profile", "profile_residual", "decay_rate",
    "ShockFixingZ", "CorrectorSet", "eigvec_z_derivative",
    "inner_rhs_h", "compute_H_pm", "solve_inner_U1",
    "shock_coupling_solve", "build_V1", "solve_outer_corrector",
    "CutoffConfig", "smooth_step",
    "PhiMap", "ApproxSolution", "stretched_xi", "build_phi",
    "assemble_approx_solution", "evaluate_u_app",
    "evaluate_u_app_z_frame", "residual_q", "certify_scaling",
    "Grid", "Trajectory", "resolved_grid", "cell_averages",
    "solve_viscous", "error_norms", "convergence_study",
    "SpeedField", "CharCurve", "FarFieldKernel", "ProjectionSet",
    "evolve_linear_columns", "numerical_green",
    "verify_green_bounds", "write_green_csv",
]

__version__ = "0.1.0"
