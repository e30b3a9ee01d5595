"""ACOPF solving with learned dual-variable warm starts."""

from .network import (
    Branch,
    Bus,
    CaseFormatError,
    CostPolynomial,
    Generator,
    LoadProfile,
    Network,
    nominal_load,
    parse_matpower_case,
    validate,
    write_matpower_case,
)
from .acopf import (
    BranchFlow,
    DualVector,
    GenDispatch,
    OperatingPoint,
    balance_residuals,
    branch_flows,
    bus_injections,
    flat_start,
    generation_cost,
    implied_dispatch,
    partial_lagrangian,
    penalized_objective,
)
from .solver import (
    SolveError,
    SolveResult,
    SolverConfig,
    multi_start,
    solve_acopf,
    solve_partial_lagrangian,
    solve_power_flow,
)
from .mlp import MlpParams, Scaler, TrainConfig
from .dataset import DatasetSpec, Sample
from .pipeline import TrainedPipeline, evaluate, predict_warm_start, solve_with_warm_start

__version__ = "0.1.0"
