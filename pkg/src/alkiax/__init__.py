"""Adaptive localized kernel interpolation with uniform error certificates.

Typical use::

    from alkiax import ApproxConfig, SincosOracle, approximate, evaluate

    model, report = approximate(SincosOracle(), None, ApproxConfig(epsilon=1e-2))
    evaluate(model, [0.3, 0.7])
"""

__version__ = "0.1.0"

from .approximator import ApproxConfig, BuildReport, approximate, precheck_kappa_bar
from .errors import (
    AlkiaxError,
    BuildBudgetExceeded,
    ConfigError,
    InfeasibleRegionError,
    MaxDepthExceeded,
    OracleError,
    OutOfDomainError,
)
from .evaluator import Model, evaluate, evaluate_batch, stats
from .io import load, save
from .kernels import Kernel
from .oracles import (
    ConstantOracle,
    CstrConfig,
    CstrMpcOracle,
    ExternalProcessOracle,
    Oracle,
    SincosOracle,
    SyntheticRkhsOracle,
)
from .partition import DomainTransform
from .validation import (
    audit_extrapolation,
    check_assumption2,
    closed_loop_sim,
    complexity_sweep,
    validate_error_grid,
)

__all__ = [
    "ApproxConfig", "BuildReport", "approximate", "precheck_kappa_bar",
    "AlkiaxError", "BuildBudgetExceeded", "ConfigError", "InfeasibleRegionError", "MaxDepthExceeded",
    "OracleError", "OutOfDomainError",
    "Model", "evaluate", "evaluate_batch", "stats", "load", "save", "Kernel",
    "ConstantOracle", "CstrConfig", "CstrMpcOracle", "ExternalProcessOracle", "Oracle", "SincosOracle",
    "SyntheticRkhsOracle", "DomainTransform",
    "audit_extrapolation", "check_assumption2", "closed_loop_sim", "complexity_sweep", "validate_error_grid",
]
