"""Spectral solver and verification harness for backward stochastic
Lyapunov and Riccati equations, with the linear-quadratic synthesis they
support.

The public surface groups into layers:

* spectral / grid: truncation basis, diagonal semigroup, operator norms.
* coefficients / forward: coefficient models, Brownian ensembles, the
  exponential Euler state scheme and its moment audits.
* processes / lyapunov / riccati: conditional operator surfaces, the two
  backward solvers and their fixed-point and regularization audits.
* control: feedback synthesis, value identity and suboptimality probes.
* config / report / verify / cli: experiment files, delimited artifacts,
  figures and the self-check suite.
"""

from .coefficients import (
    Bounds,
    BrownianEnsemble,
    BrownianPath,
    CoefficientModel,
    ConstantDiagonal,
    DeterministicSchedule,
    FieldExpression,
    ScalarRandomField,
    eval_coefficients,
    sample_paths,
    validate_model,
)
from .config import ExperimentConfig, load_config, parse_config, save_config
from .control import (
    LoopResult,
    closed_loop,
    completion_of_squares,
    feedback_gain,
    suboptimality_probe,
    value_check,
)
from .errors import (
    BallViolationError,
    BoundViolationError,
    BsreError,
    ContractViolationError,
    DomainError,
    InvalidConfigurationError,
    NonConvergenceError,
    OracleFailureError,
)
from .forward import empirical_C2, flow_matrices, moment_audit, propagate
from .grid import TimeGrid
from .lyapunov import (
    BackwardSolution,
    SolverOptions,
    apriori_audit,
    extract_Q,
    gamma_apply,
    jn_stability_audit,
    lyapunov_representation_solve,
    picard_solve,
    weak_source_solve,
)
from .processes import OperatorProcess
from .riccati import RiccatiConfig, diagonal_oracle, lambda_apply, riccati_solve
from .spectral import (
    OperatorMatrix,
    SpectralBasis,
    jn_conjugate,
    jn_factors,
    laplacian_basis,
    norm,
    semigroup_conjugate,
    smoothing_audit,
)
from .verify import run_verification

__version__ = "0.1.0"

__all__ = [
    "BackwardSolution",
    "BallViolationError",
    "Bounds",
    "BoundViolationError",
    "BrownianEnsemble",
    "BrownianPath",
    "BsreError",
    "CoefficientModel",
    "ConstantDiagonal",
    "ContractViolationError",
    "DeterministicSchedule",
    "DomainError",
    "ExperimentConfig",
    "FieldExpression",
    "InvalidConfigurationError",
    "LoopResult",
    "NonConvergenceError",
    "OperatorMatrix",
    "OperatorProcess",
    "OracleFailureError",
    "RiccatiConfig",
    "ScalarRandomField",
    "SolverOptions",
    "SpectralBasis",
    "TimeGrid",
    "apriori_audit",
    "closed_loop",
    "completion_of_squares",
    "diagonal_oracle",
    "empirical_C2",
    "eval_coefficients",
    "extract_Q",
    "feedback_gain",
    "flow_matrices",
    "gamma_apply",
    "jn_conjugate",
    "jn_factors",
    "jn_stability_audit",
    "lambda_apply",
    "laplacian_basis",
    "load_config",
    "lyapunov_representation_solve",
    "moment_audit",
    "norm",
    "parse_config",
    "picard_solve",
    "propagate",
    "riccati_solve",
    "run_verification",
    "sample_paths",
    "save_config",
    "semigroup_conjugate",
    "smoothing_audit",
    "suboptimality_probe",
    "validate_model",
    "value_check",
    "weak_source_solve",
]
