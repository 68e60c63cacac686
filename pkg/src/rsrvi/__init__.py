"""Risk-sensitive value iteration and relative value iteration.

Solvers for the multiplicative dynamic programming equation of finite
controlled Markov chains, a Markov chain approximation bridge for controlled
diffusions, and independent spectral and Monte Carlo checks.
"""

__version__ = "0.1.0"

from .chain_model import (ChainModel, ModelError, SparseChainModel, load_model, random_model,
                          restrict, serialize, validate)
from .rvi_core import (SolveReport, SolverConfig, bellman_min, coupling_check, cw_bounds,
                       dp_residual, rvi_step, solve_rvi, solve_vi, twisted_kernel, vi_step)
from .spectral_oracle import PerronResult, dense_perron, enumerate_min, policy_perron

__all__ = [
    "ChainModel", "ModelError", "SparseChainModel", "load_model", "random_model", "restrict",
    "serialize", "validate", "SolveReport", "SolverConfig", "bellman_min", "coupling_check",
    "cw_bounds", "dp_residual", "rvi_step", "solve_rvi", "solve_vi", "twisted_kernel",
    "vi_step", "PerronResult", "dense_perron", "enumerate_min", "policy_perron",
]
