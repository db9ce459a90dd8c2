"""Minimum-effort steering of densities under reflected diffusions on boxes.

The package solves the following problem: given a box domain, a diffusion
temperature, an optional prior drift, and two endpoint probability densities,
find the time-dependent feedback control of least expected quadratic cost
that carries the first density into the second over the unit time horizon,
where the state follows a reflected (normal-derivative-zero) diffusion.

Layout
------
core         shared domain / grid / density / config types and errors
kernel1d     reflected Brownian transition kernel on an interval
fpk          conservative finite-volume Fokker-Planck marching, proximal step
bridge       fixed-point solver for the endpoint-matching factor pair
sde          reflected Euler-Maruyama path sampling and ensemble export
expressions  safe parsing of scalar field expressions
estimator    scikit-learn style front end
cli          command line entry point
"""

from .bridge import (
    BridgeSolution,
    FactorPair,
    FpkEngine,
    KernelEngine,
    control_field,
    half_bridge,
    hilbert_metric,
    solve,
)
from .core import (
    BoxBridgeError,
    BoxDomain,
    ConfigError,
    ControlOutOfRangeError,
    DivergedError,
    DomainMismatchError,
    DriftSpec,
    ExpressionError,
    FloorDominantError,
    Grid,
    GridDensity,
    LinearSolveFailure,
    MaxIterationsError,
    MissingSolutionError,
    NonPositiveError,
    OutOfDomainError,
    ProxNoConvergeError,
    SolverConfig,
    ZeroMassError,
    density_cdf,
    inverse_cdf,
    l1_distance,
    normalize,
    trapezoid_mass,
)
from .expressions import ScalarExpression, parse_expression
from .fpk import FpkProblem
from .kernel1d import ReflectedHeatKernel
from .sde import (
    ControlField,
    PathEnsemble,
    empirical_marginal,
    inverse_cdf_sample,
    ks_statistic,
    simulate,
    skorokhod_step_1d,
    write_ensemble_csv,
)

__version__ = "0.1.0"

__all__ = [
    "BoxBridgeError",
    "BoxDomain",
    "BridgeSolution",
    "ConfigError",
    "ControlField",
    "ControlOutOfRangeError",
    "DivergedError",
    "DomainMismatchError",
    "DriftSpec",
    "ExpressionError",
    "FactorPair",
    "FloorDominantError",
    "FpkEngine",
    "FpkProblem",
    "Grid",
    "GridDensity",
    "KernelEngine",
    "LinearSolveFailure",
    "MaxIterationsError",
    "MissingSolutionError",
    "NonPositiveError",
    "OutOfDomainError",
    "PathEnsemble",
    "ProxNoConvergeError",
    "ReflectedHeatKernel",
    "ScalarExpression",
    "SolverConfig",
    "ZeroMassError",
    "control_field",
    "density_cdf",
    "empirical_marginal",
    "half_bridge",
    "hilbert_metric",
    "inverse_cdf",
    "inverse_cdf_sample",
    "ks_statistic",
    "l1_distance",
    "normalize",
    "parse_expression",
    "simulate",
    "skorokhod_step_1d",
    "solve",
    "trapezoid_mass",
    "write_ensemble_csv",
    "__version__",
]
