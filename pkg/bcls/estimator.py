"""
Bias-corrected least squares.

Each estimation stage integrates a state equation over the observation grid and
turns it into a linear regression: the response collects observations and known
terms, the covariates are cumulative integrals of (bias-corrected) basis values,
and an optional intercept absorbs an unknown initial condition.
"""
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.linalg import qr, solve_triangular

from .errors import (
    BclsError,
    InsufficientDataError,
    InvalidDataError,
    MalformedStageError,
    MissingPriorError,
    NonPositiveDataError,
    RankDeficientError,
    StageError,
)
from .expressions import compile_expression, format_expression
from .library import resolve_stage_plan
from .logging_utils import get_logger
from .models import (
    Coefficient,
    EstimationStage,
    IntegralTerm,
    ModelSpec,
    ObservationTerm,
    OneTerm,
    StagePlan,
    TimeSeriesData,
    TimeTerm,
)
from .noise import NoiseModel, correct_basis
from .quadrature import QuadratureRule, cumulative_integral

logger = get_logger()

RANK_TOLERANCE = 1e-10


class BclsOptions(BaseModel):
    """rule: quadrature for the covariates; corrected=False gives plain LS."""
    model_config = ConfigDict(frozen=True)

    rule: QuadratureRule = "trapezoid"
    corrected: bool = True


@dataclass
class StageDesign:
    response: np.ndarray
    design: np.ndarray
    labels: list[str]


@dataclass
class LinearSolution:
    coefficients: np.ndarray
    residuals: np.ndarray


@dataclass
class StageResult:
    index: int
    label: str
    estimates: dict[str, float]
    coefficients: np.ndarray
    response: np.ndarray
    design: np.ndarray
    labels: list[str]
    residuals: np.ndarray
    residual_sd: float


@dataclass
class BclsFit:
    estimates: dict[str, float]
    parameters: dict[str, float]
    initial_conditions: dict[str, float]
    stages: list[StageResult] = field(default_factory=list)
    corrected: bool = True
    rule: QuadratureRule = "trapezoid"


def _term_values(term, data: TimeSeriesData, noise: NoiseModel, rule: QuadratureRule, corrected: bool) -> np.ndarray:
    if isinstance(term, ObservationTerm):
        y = data.observations[term.state]
        if term.transform == "log":
            if np.any(y <= 0):
                raise NonPositiveDataError(
                    f"Log transform of {data.state_names[term.state]} needs positive observations"
                )
            return np.log(y)
        return y.copy()
    if isinstance(term, IntegralTerm):
        if corrected and term.corrected:
            samples = correct_basis(term.basis, noise, term.correction).evaluate(data.observations)
        else:
            raw = compile_expression(term.basis)(data.observations)
            samples = np.broadcast_to(np.asarray(raw, dtype=float), data.times.shape)
        return cumulative_integral(samples, data.times, rule).values
    if isinstance(term, TimeTerm):
        return data.times - data.times[0]
    if isinstance(term, OneTerm):
        return np.ones_like(data.times)
    raise MalformedStageError(f"Unknown stage term {term!r}")


def _coefficient(coefficient: Coefficient, priors: Mapping[str, float]) -> float:
    if coefficient.prior is None:
        return coefficient.value
    if coefficient.prior not in priors:
        raise MissingPriorError(f"Prior estimate of '{coefficient.prior}' is not available")
    return coefficient.value * priors[coefficient.prior]


def build_stage_design(
    stage: EstimationStage,
    data: TimeSeriesData,
    noise: NoiseModel,
    priors: Mapping[str, float],
    rule: QuadratureRule = "trapezoid",
    corrected: bool = True,
) -> StageDesign:
    """
    Assemble the regression response, design matrix and column labels of a stage.

    Parameters:
    -----------

        - stage (EstimationStage): Response and covariate recipe.
        - data (TimeSeriesData): Observations on the time grid.
        - noise (NoiseModel): Noise levels used by the basis corrections.
        - priors (Mapping[str, float]): Estimates from earlier stages.
        - rule (str): "trapezoid" or "left".
        - corrected (bool): Use bias-corrected bases for integral terms.

    Returns:
    --------

        - StageDesign: response (n,), design (n, p) and one label per column; the
          intercept column, when configured, comes last.
    """
    if not stage.covariate_terms:
        raise MalformedStageError(f"Stage '{stage.label}' has no covariate terms")
    if not stage.response_terms:
        raise MalformedStageError(f"Stage '{stage.label}' has no response terms")

    response = np.zeros(data.n)
    for item in stage.response_terms:
        scale = _coefficient(item.coefficient, priors)
        response = response + scale * _term_values(item.term, data, noise, rule, corrected)

    columns = [c.sign * _term_values(c.term, data, noise, rule, corrected) for c in stage.covariate_terms]
    labels = [c.target for c in stage.covariate_terms]
    if stage.intercept is not None:
        if stage.intercept.divide_by is not None and stage.intercept.divide_by not in priors:
            raise MissingPriorError(f"Prior estimate of '{stage.intercept.divide_by}' is not available")
        columns.append(np.ones(data.n))
        labels.append(stage.intercept.estimates)
    return StageDesign(response=response, design=np.column_stack(columns), labels=labels)


def solve_linear(design, response, labels: list[str] | None = None) -> LinearSolution:
    """
    Least squares via column-pivoted QR.

    Raises RankDeficientError when a pivot of R falls below 1e-10 of the largest.
    """
    Z = np.asarray(design, dtype=float)
    y = np.asarray(response, dtype=float)
    if Z.ndim != 2 or y.ndim != 1 or Z.shape[0] != y.shape[0]:
        raise InvalidDataError(f"design {Z.shape} and response {y.shape} do not conform")
    rows, cols = Z.shape
    if rows < cols:
        raise InsufficientDataError(f"{rows} rows cannot determine {cols} coefficients")
    if not np.all(np.isfinite(Z)) or not np.all(np.isfinite(y)):
        raise InvalidDataError("design or response contains non-finite entries")

    Q, R, pivots = qr(Z, mode="economic", pivoting=True)
    diagonal = np.abs(np.diag(R))
    largest = diagonal[0] if cols else 0.0
    rank = int(np.sum(diagonal > RANK_TOLERANCE * largest)) if largest > 0 else 0
    if rank < cols:
        raise RankDeficientError(rank, cols, labels)

    solution = solve_triangular(R, Q.T @ y)
    coefficients = np.empty(cols)
    coefficients[pivots] = solution
    return LinearSolution(coefficients=coefficients, residuals=y - Z @ coefficients)


def fit_stage(index: int, stage: EstimationStage, built: StageDesign, priors: Mapping[str, float]) -> StageResult:
    """Solve one stage and post-process its intercept into an initial condition."""
    solution = solve_linear(built.design, built.response, built.labels)
    estimates = dict(zip(built.labels, (float(c) for c in solution.coefficients)))
    if stage.intercept is not None:
        name = stage.intercept.estimates
        value = estimates[name]
        if stage.intercept.divide_by is not None:
            value = value / priors[stage.intercept.divide_by]
        if stage.intercept.exponentiate:
            value = math.exp(value)
        estimates[name] = value

    rows, cols = built.design.shape
    rss = float(solution.residuals @ solution.residuals)
    residual_sd = math.sqrt(rss / (rows - cols)) if rows > cols else 0.0
    return StageResult(
        index=index,
        label=stage.label or f"stage {index + 1}",
        estimates=estimates,
        coefficients=solution.coefficients,
        response=built.response,
        design=built.design,
        labels=built.labels,
        residuals=solution.residuals,
        residual_sd=residual_sd,
    )


def fit_bcls(
    model: ModelSpec,
    data: TimeSeriesData,
    noise: NoiseModel,
    plan: Optional[StagePlan] = None,
    options: Optional[BclsOptions] = None,
) -> BclsFit:
    """
    Run the stages of a plan in order, feeding estimates forward as priors.

    With options.corrected False the integral covariates use the raw basis, which
    is ordinary (uncorrected) least squares.

    Raises:
    -------

        - StageError: wraps the first failing stage's error, with its index.
    """
    options = options or BclsOptions()
    plan = plan or resolve_stage_plan(model)
    data.check(model, noise)

    priors: dict[str, float] = {}
    results = []
    for i, stage in enumerate(plan.stages):
        try:
            built = build_stage_design(stage, data, noise, priors, options.rule, options.corrected)
            result = fit_stage(i, stage, built, priors)
        except BclsError as e:
            logger.error(f"Stage {i + 1} of {model.name} failed: {e}")
            raise StageError(i, e) from e
        logger.info(
            "Stage solved",
            model=model.name,
            stage=result.label,
            rows=int(built.design.shape[0]),
            estimates=result.estimates,
            residual_sd=result.residual_sd,
        )
        priors.update(result.estimates)
        results.append(result)

    parameters = {p: priors[p] for p in model.parameter_names if p in priors}
    initial_conditions = {ic: priors[ic] for ic in model.estimated_initial_conditions if ic in priors}
    return BclsFit(
        estimates=dict(priors),
        parameters=parameters,
        initial_conditions=initial_conditions,
        stages=results,
        corrected=options.corrected,
        rule=options.rule,
    )


def estimating_function(fit: BclsFit, stage: int, beta=None) -> np.ndarray:
    """
    U_n(β) = Zᵀ(y - Zβ) / n for one stage; zero at the fitted coefficients.

    `beta` is on the regression scale (intercept before any division).
    """
    result = fit.stages[stage]
    coefficients = result.coefficients if beta is None else np.asarray(beta, dtype=float)
    Z = result.design
    return Z.T @ (result.response - Z @ coefficients) / Z.shape[0]


def fitted_response(stage: StageResult) -> np.ndarray:
    return stage.design @ stage.coefficients


def describe_stage(stage: EstimationStage, model: ModelSpec) -> str:
    """One-line human summary of a stage's regression."""
    parts = []
    for c in stage.covariate_terms:
        term = c.term
        if isinstance(term, IntegralTerm):
            text = f"∫{format_expression(term.basis)}"
        elif isinstance(term, TimeTerm):
            text = "t"
        elif isinstance(term, ObservationTerm):
            text = model.state_names[term.state]
        else:
            text = "1"
        parts.append(f"{'-' if c.sign < 0 else ''}{c.target}·{text}")
    if stage.intercept is not None:
        parts.append(stage.intercept.estimates)
    return f"{stage.label}: " + " + ".join(parts)
