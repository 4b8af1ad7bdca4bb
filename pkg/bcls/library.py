"""
Built-in models and derivation of default estimation stages.
"""
import math

from .errors import MalformedStageError, UnknownModelError
from .models import (
    Coefficient,
    CovariateTerm,
    EstimationStage,
    InitialCondition,
    IntegralTerm,
    Intercept,
    ModelSpec,
    ObservationTerm,
    OneTerm,
    ResponseTerm,
    StageTerm,
    StagePlan,
    StateEquation,
    TermSpec,
    TimeTerm,
    initial_condition_name,
)
from .parser import parse_expression
from .polynomial import PolynomialForm, polynomial_normal_form

MODEL_ALIASES = {"fn": "fitzhugh_nagumo"}
BUILTIN_MODELS = ("logistic", "fitzhugh_nagumo")

FN_CURRENT_BASIS = "V - V^3/3 + R"


def logistic_model(x0: float | None = 2.0) -> ModelSpec:
    """dX/dt = aX - bX^2, fitted on the log scale with X(0) known by default."""
    states = ["X"]
    equation = StateEquation(
        state_index=0,
        terms=(
            TermSpec(parameter_name="a", basis=parse_expression("X", states), sign=1),
            TermSpec(parameter_name="b", basis=parse_expression("X^2", states), sign=-1),
        ),
        transform="log",
    )
    return ModelSpec(
        name="logistic",
        state_names=tuple(states),
        equations=(equation,),
        initial_conditions={"X": InitialCondition(value=x0)},
    )


def fitzhugh_nagumo_model() -> ModelSpec:
    """
    FitzHugh-Nagumo spike potentials.

        dV/dt = C (V - V^3/3 + R)
        dR/dt = -(1/C) (V - a + b R)

    Both initial conditions are estimated. Stage 1 fits (C, v0) from the V equation;
    stage 2 multiplies the R equation through by the stage-1 C and fits (a, b, r0).
    """
    states = ["V", "R"]
    v_equation = StateEquation(
        state_index=0,
        terms=(TermSpec(parameter_name="C", basis=parse_expression(FN_CURRENT_BASIS, states)),),
    )
    r_equation = StateEquation(
        state_index=1,
        terms=(
            TermSpec(parameter_name=None, basis=parse_expression("V", states), sign=-1),
            TermSpec(parameter_name="a", basis=parse_expression("1", states), sign=1),
            TermSpec(parameter_name="b", basis=parse_expression("R", states), sign=-1),
        ),
        divide_by="C",
    )
    stage1 = EstimationStage(
        label="V equation",
        response_terms=(ResponseTerm(term=ObservationTerm(state=0)),),
        covariate_terms=(
            CovariateTerm(target="C", term=IntegralTerm(basis=v_equation.terms[0].basis)),
        ),
        intercept=Intercept(estimates="v0"),
    )
    stage2 = EstimationStage(
        label="R equation",
        response_terms=(
            ResponseTerm(coefficient=Coefficient(prior="C"), term=ObservationTerm(state=1)),
            ResponseTerm(
                coefficient=Coefficient(value=1.0),
                term=IntegralTerm(basis=r_equation.terms[0].basis),
            ),
        ),
        covariate_terms=(
            CovariateTerm(target="a", term=TimeTerm(), sign=1),
            CovariateTerm(target="b", term=IntegralTerm(basis=r_equation.terms[2].basis), sign=-1),
        ),
        intercept=Intercept(estimates="r0", divide_by="C"),
    )
    return ModelSpec(
        name="fitzhugh_nagumo",
        state_names=tuple(states),
        equations=(v_equation, r_equation),
        initial_conditions={"V": InitialCondition(), "R": InitialCondition()},
        stages=StagePlan(stages=(stage1, stage2)),
    )


def builtin_model(name: str) -> ModelSpec:
    key = MODEL_ALIASES.get(name, name)
    if key == "logistic":
        return logistic_model()
    if key == "fitzhugh_nagumo":
        return fitzhugh_nagumo_model()
    raise UnknownModelError(f"Unknown model '{name}' (available: {', '.join(BUILTIN_MODELS)}, fn)")


def _integrated_term(form: PolynomialForm | None, basis, correction) -> StageTerm:
    if form is not None and form.is_constant_one and correction is None:
        return TimeTerm()
    return IntegralTerm(basis=basis, correction=correction)


def default_stage_plan(model: ModelSpec) -> StagePlan:
    """
    Derive one regression stage per equation, in equation order.

    Integrating dx/dt = (1/D) Σ sign·β·h from t0 and multiplying by D gives

        D·x(t) - D·x0 = Σ sign·β·∫h

    Parameters not yet estimated become covariates. Fixed terms and terms whose
    parameter an earlier stage already estimated move into the response, as does
    a known x0. An estimated x0 becomes the intercept (divided by D afterwards).
    Under the log transform each basis is divided by its own state first
    (d log x/dt = Σ sign·β·h/x) and a constant basis turns into elapsed time.

    Raises:
    -------

        - MalformedStageError: an equation that cannot be arranged (divisor not yet
          estimated, non-divisible basis under the log transform, non-positive known
          x0 under the log transform, or an intercept with no covariates).
    """
    estimated: set[str] = set()
    stages = []
    for eq in model.equations:
        state = model.state_names[eq.state_index]
        log_scale = eq.transform == "log"
        divisor = eq.divide_by
        if divisor is not None:
            if log_scale:
                raise MalformedStageError(f"{state} equation: divide_by is not supported with the log transform")
            if divisor not in estimated:
                raise MalformedStageError(
                    f"{state} equation: divisor '{divisor}' must be estimated by an earlier equation"
                )

        response = [
            ResponseTerm(
                coefficient=Coefficient(prior=divisor),
                term=ObservationTerm(state=eq.state_index, transform=eq.transform),
            )
        ]
        covariates = []
        for term in eq.terms:
            basis = term.basis
            form = polynomial_normal_form(basis, model.s)
            form = form if isinstance(form, PolynomialForm) else None
            if log_scale:
                divided = form.divide_by_state(eq.state_index) if form is not None else None
                if divided is None:
                    raise MalformedStageError(
                        f"{state} equation: basis of '{term.parameter_name or 'fixed term'}' "
                        f"is not divisible by {state} under the log transform"
                    )
                form = divided
                basis = divided.to_expression(model.state_names)
            stage_term = _integrated_term(form, basis, term.correction)

            if term.parameter_name is None or term.parameter_name in estimated:
                response.append(
                    ResponseTerm(
                        coefficient=Coefficient(value=-float(term.sign), prior=term.parameter_name),
                        term=stage_term,
                    )
                )
            else:
                covariates.append(CovariateTerm(target=term.parameter_name, term=stage_term, sign=term.sign))

        intercept = None
        x0 = model.initial_value(eq.state_index)
        if x0 is None:
            intercept = Intercept(
                estimates=initial_condition_name(state), divide_by=divisor, exponentiate=log_scale
            )
        elif log_scale:
            if x0 <= 0:
                raise MalformedStageError(f"{state} equation: known initial value must be positive on the log scale")
            response.append(ResponseTerm(coefficient=Coefficient(value=-math.log(x0)), term=OneTerm()))
        elif x0 != 0.0:
            response.append(ResponseTerm(coefficient=Coefficient(value=-x0, prior=divisor), term=OneTerm()))

        if not covariates:
            if intercept is not None:
                raise MalformedStageError(f"{state} equation: initial condition alone cannot be estimated")
            continue
        stage = EstimationStage(
            label=f"{state} equation",
            response_terms=tuple(response),
            covariate_terms=tuple(covariates),
            intercept=intercept,
        )
        stages.append(stage)
        estimated.update(stage.targets)
    return StagePlan(stages=tuple(stages))


def resolve_stage_plan(model: ModelSpec) -> StagePlan:
    """The model's explicit plan, or the derived default."""
    return model.stages if model.stages is not None else default_stage_plan(model)
