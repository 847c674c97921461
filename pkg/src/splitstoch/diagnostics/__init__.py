"""Evaluation of objectives, residuals and Lyapunov values, plus reference optima."""

from splitstoch.diagnostics.metrics import (
    certificate_from_subgradients,
    consensus_metrics,
    descent_penalties,
    eval_H,
    eval_phi,
    full_participation_energy,
    gap_lower_bound_margin,
    lyapunov,
    s_residual,
)
from splitstoch.diagnostics.reference import (
    EpsReport,
    NoConvergence,
    certificate_from_run,
    eps_optimality,
    ergodic_path,
    expected_gaps,
    loglog_slope,
    reference_solve,
    run_seed,
)

__all__ = [
    "EpsReport", "NoConvergence", "certificate_from_run", "certificate_from_subgradients",
    "consensus_metrics", "descent_penalties", "eps_optimality", "ergodic_path", "eval_H",
    "eval_phi", "expected_gaps", "full_participation_energy", "gap_lower_bound_margin", "loglog_slope",
    "lyapunov", "reference_solve", "run_seed", "s_residual",
]
