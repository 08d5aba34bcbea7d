"""Numerical laboratory for reflected backward doubly stochastic systems
with Poisson jumps: driving-noise models, a generator expression language
with envelope transforms, exact-tree and least-squares solvers, monotone
approximation schemes, and structural validators."""

__version__ = "0.1.0"

from .analysis import (
    ComparisonReport,
    ItoComponents,
    ItoReport,
    PositivityReport,
    compare_solutions,
    ito_residual_check,
    norm_report,
    positivity_check,
    skorokhod_check,
)
from .config import ExperimentConfig, config_from_dict, load_config
from .drivers import (
    MarkSpace,
    ScenarioSet,
    TimeGrid,
    build_time_grid,
    empty_marks,
    enumerate_scenarios,
    simulate_scenarios,
)
from .errors import (
    ConfigError,
    EnvelopeError,
    EvalError,
    ParseError,
    RbdsdepError,
    SolverError,
)
from .expr import EvalContext, evaluate, parse_expr, to_string, variables
from .generator import (
    Cloud,
    EnvelopeFunction,
    EnvelopeParams,
    GeneratorSpec,
    check_g_contraction,
    check_linear_growth,
    check_pi_minorant,
    inf_convolution,
    sample_cloud,
    sup_convolution,
)
from .schemes import (
    SequenceRun,
    run_bracketing_sequence,
    run_inf_envelope_sequence,
    run_sup_envelope_sequence,
    solve_upper_bound_tree,
)
from .solver import (
    ProblemSpec,
    SchemeParams,
    SolutionGrid,
    TreeModel,
    TreeSolution,
    extract_zu,
    reflect_step,
    solve_lsmc,
    solve_tree_exact,
    tree_balance_residual,
)

__all__ = [
    "__version__",
    "ComparisonReport",
    "ItoComponents",
    "ItoReport",
    "PositivityReport",
    "compare_solutions",
    "ito_residual_check",
    "norm_report",
    "positivity_check",
    "skorokhod_check",
    "ExperimentConfig",
    "config_from_dict",
    "load_config",
    "MarkSpace",
    "ScenarioSet",
    "TimeGrid",
    "build_time_grid",
    "empty_marks",
    "enumerate_scenarios",
    "simulate_scenarios",
    "ConfigError",
    "EnvelopeError",
    "EvalError",
    "ParseError",
    "RbdsdepError",
    "SolverError",
    "EvalContext",
    "evaluate",
    "parse_expr",
    "to_string",
    "variables",
    "Cloud",
    "EnvelopeFunction",
    "EnvelopeParams",
    "GeneratorSpec",
    "check_g_contraction",
    "check_linear_growth",
    "check_pi_minorant",
    "inf_convolution",
    "sample_cloud",
    "sup_convolution",
    "SequenceRun",
    "run_bracketing_sequence",
    "run_inf_envelope_sequence",
    "run_sup_envelope_sequence",
    "solve_upper_bound_tree",
    "ProblemSpec",
    "SchemeParams",
    "SolutionGrid",
    "TreeModel",
    "TreeSolution",
    "extract_zu",
    "reflect_step",
    "solve_lsmc",
    "solve_tree_exact",
    "tree_balance_residual",
]
