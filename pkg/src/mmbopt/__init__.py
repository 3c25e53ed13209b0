"""Randomized block algorithms for multi-block min-max bilevel optimization."""
from .errors import ConfigurationError, ContractViolation, NumericalError, SingleClassBatch, UndefinedMetricError
from .hypergrad import diagnostics_report, exact_grad_F, fd_grad_F
from .optimizer import RunConfig, RunResult, State, TraceRecord, init_state, run, step
from .problem import (
    DualSet, MinMaxBilevelProblem, ProblemDims, SmoothnessProfile, SyntheticQuadraticProblem, make_problem,
    synth_generate,
)
from .rng import RngStream

__version__ = "0.1.0"
