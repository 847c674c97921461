"""Stochastic distributed regularized splitting for composite convex problems
``min_x sum_i f_i(x) + g_i(x)`` with random partial participation."""

from splitstoch.core import (
    AgentSpec,
    DimensionMismatch,
    EmptyParameterWindow,
    ErgodicAverages,
    InvalidConfig,
    IterateState,
    OptimalityCertificate,
    ProblemInstance,
    SolverConfig,
    SplitStochError,
    TraceRecord,
    ValidationReport,
    initial_state,
    make_config,
    validate_config,
)
from splitstoch.sampling import ParticipationPolicy, SampleDraw, draw, inclusion_probability
from splitstoch.solver import (
    MaxItersExceeded,
    NonFiniteIterate,
    RunResult,
    VirtualIterate,
    run,
    server_update,
    step,
    user_update,
    virtual_update,
)

__version__ = "0.1.0"

__all__ = [
    "AgentSpec", "DimensionMismatch", "EmptyParameterWindow", "ErgodicAverages", "InvalidConfig",
    "IterateState", "MaxItersExceeded", "NonFiniteIterate", "OptimalityCertificate",
    "ParticipationPolicy", "ProblemInstance", "RunResult", "SampleDraw", "SolverConfig",
    "SplitStochError", "TraceRecord", "ValidationReport", "VirtualIterate", "draw",
    "inclusion_probability", "initial_state", "make_config", "run", "server_update", "step",
    "user_update", "validate_config", "virtual_update",
]
