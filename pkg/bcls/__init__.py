from .estimator import (
    BclsFit,
    BclsOptions,
    StageResult,
    build_stage_design,
    estimating_function,
    fit_bcls,
    fitted_response,
    solve_linear,
)
from .expressions import BasisExpr, evaluate_basis, format_expression
from .library import builtin_model, default_stage_plan, resolve_stage_plan
from .loader import load_model, load_model_file, read_series_csv, write_series_csv
from .models import (
    EstimationStage,
    ModelSpec,
    StagePlan,
    TimeSeriesData,
)
from .montecarlo import (
    ConfidenceInterval,
    McConfig,
    McSummary,
    MethodSpec,
    TimeGrid,
    bootstrap_coverage,
    consistency_sweep,
    nonparametric_bootstrap,
    parametric_bootstrap,
    run_monte_carlo,
)
from .nls import NlsConfig, NlsFit, SurfaceAxis, fit_nls, local_minima, sse_surface, weighted_sse
from .noise import CorrectedBasis, NoiseModel, correct_basis, corrected_evaluate, estimate_sigma
from .odesim import Trajectory, simulate_data, solve_ode
from .parser import parse_expression
from .polynomial import NonPolynomial, PolynomialForm, polynomial_normal_form
from .quadrature import CumulativeIntegral, cumleft, cumtrapz
from .validation import Diagnostic, validate_model

__all__ = [
    "BasisExpr",
    "parse_expression",
    "evaluate_basis",
    "format_expression",
    "polynomial_normal_form",
    "PolynomialForm",
    "NonPolynomial",
    "ModelSpec",
    "EstimationStage",
    "StagePlan",
    "TimeSeriesData",
    "builtin_model",
    "default_stage_plan",
    "resolve_stage_plan",
    "validate_model",
    "Diagnostic",
    "load_model",
    "load_model_file",
    "read_series_csv",
    "write_series_csv",
    "NoiseModel",
    "CorrectedBasis",
    "correct_basis",
    "corrected_evaluate",
    "estimate_sigma",
    "CumulativeIntegral",
    "cumtrapz",
    "cumleft",
    "BclsOptions",
    "BclsFit",
    "StageResult",
    "build_stage_design",
    "solve_linear",
    "fit_bcls",
    "estimating_function",
    "fitted_response",
    "Trajectory",
    "solve_ode",
    "simulate_data",
    "NlsConfig",
    "NlsFit",
    "SurfaceAxis",
    "weighted_sse",
    "fit_nls",
    "sse_surface",
    "local_minima",
    "McConfig",
    "McSummary",
    "MethodSpec",
    "TimeGrid",
    "ConfidenceInterval",
    "run_monte_carlo",
    "parametric_bootstrap",
    "nonparametric_bootstrap",
    "bootstrap_coverage",
    "consistency_sweep",
]
