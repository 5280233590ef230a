"""Pseudospectral simulator and verification lab for the generalized MBE equation."""

__version__ = "0.1.0"

from .diagnostics import RunRecord, coarseness, energy_m, fit_coarsening_exponent, gronwall_check
from .nonlinearity import ModelParams, eval_nonlinearity, eval_nonlinearity_shifted
from .semigroup import apply_semigroup, fit_decay_rate, verify_decay
from .solver import Scheme, SolverConfig, etd_step, picard_iterate, solve_deterministic
from .spectral import Field, Grid, hs_norm, lp_norm, make_grid, x0_norm
from .stochastic import EnsembleJob, NoiseSpec, mc_ensemble, sample_z_step, solve_stochastic

__all__ = [
    "EnsembleJob", "Field", "Grid", "ModelParams", "NoiseSpec", "RunRecord", "Scheme", "SolverConfig",
    "apply_semigroup", "coarseness", "energy_m", "etd_step", "eval_nonlinearity",
    "eval_nonlinearity_shifted", "fit_coarsening_exponent", "fit_decay_rate", "gronwall_check",
    "hs_norm", "lp_norm", "make_grid", "mc_ensemble", "picard_iterate", "sample_z_step",
    "solve_deterministic", "solve_stochastic", "verify_decay", "x0_norm",
]
