"""Constrained mass transport.

Anneal a Gaussian-mixture approximation from a broad start towards an
unnormalized target through intermediate densities chosen by a KL trust
region and an entropy-decay bound, each fitted by importance-weighted EM.
"""

from .config import RunConfig, load_config
from .core import (
    CMTError,
    DegenerateBufferError,
    InvariantError,
    MultiplierPair,
    PathState,
    WeightedBuffer,
    draw_buffer,
    entropy_estimate,
    quadrature_buffer,
)
from .dual import DualConfig, dual_ent, dual_tr, dual_tr_ent, log_z_estimate, maximize_scalar, solve_multipliers
from .metrics import RunMetrics, ess_fraction
from .mixture import FitConfig, MixtureModel, importance_weights, weighted_fit
from .path import PathLedger, closed_form_log_density, iterated_log_density, next_intermediate, update_ledger
from .runner import run, run_fixed_linear
from .targets import TargetSpec, make_target, reference_stats

__all__ = [
    "CMTError", "DegenerateBufferError", "InvariantError", "MultiplierPair", "PathState", "WeightedBuffer",
    "draw_buffer", "entropy_estimate", "quadrature_buffer",
    "DualConfig", "dual_ent", "dual_tr", "dual_tr_ent", "log_z_estimate", "maximize_scalar", "solve_multipliers",
    "RunMetrics", "ess_fraction", "FitConfig", "MixtureModel", "importance_weights", "weighted_fit",
    "PathLedger", "closed_form_log_density", "iterated_log_density", "next_intermediate", "update_ledger",
    "RunConfig", "load_config", "run", "run_fixed_linear", "TargetSpec", "make_target", "reference_stats",
]
