from pydantic import BaseModel, ConfigDict

from .errors import MalformedStageError
from .expressions import referenced_states
from .library import default_stage_plan
from .models import IntegralTerm, ModelSpec, ObservationTerm, StagePlan


class Diagnostic(BaseModel):
    """A violated structural invariant: `code` names it, `subject` what it concerns."""
    model_config = ConfigDict(frozen=True)

    code: str
    subject: str = ""
    message: str = ""

    def __str__(self) -> str:
        subject = f"({self.subject})" if self.subject else ""
        return f"{self.code}{subject}: {self.message}" if self.message else f"{self.code}{subject}"


def _stage_term_states(term) -> set[int]:
    if isinstance(term, ObservationTerm):
        return {term.state}
    if isinstance(term, IntegralTerm):
        found = referenced_states(term.basis)
        if term.correction is not None:
            found |= referenced_states(term.correction)
        return found
    return set()


def _validate_equations(spec: ModelSpec) -> list[Diagnostic]:
    issues = []
    s = spec.s
    seen_states: set[int] = set()
    for eq in spec.equations:
        if not 0 <= eq.state_index < s:
            issues.append(Diagnostic(code="StateIndexOutOfRange", subject=str(eq.state_index),
                                     message=f"equation state index outside 0..{s - 1}"))
            continue
        name = spec.state_names[eq.state_index]
        if eq.state_index in seen_states:
            issues.append(Diagnostic(code="DuplicateEquation", subject=name))
        seen_states.add(eq.state_index)
        if not eq.terms:
            issues.append(Diagnostic(code="EmptyEquation", subject=name, message="equation has no terms"))

        params = eq.parameter_names
        for p in sorted({p for p in params if params.count(p) > 1}):
            issues.append(Diagnostic(code="DuplicateParameter", subject=p,
                                     message=f"parameter appears twice in the {name} equation"))

        for term in eq.terms:
            states = referenced_states(term.basis)
            if term.correction is not None:
                states |= referenced_states(term.correction)
            for q in sorted(q for q in states if q >= s):
                issues.append(Diagnostic(code="StateIndexOutOfRange", subject=str(q),
                                         message=f"basis in the {name} equation references state {q}"))

        if eq.divide_by is not None:
            defined = [p for other in spec.equations for p in other.parameter_names]
            if eq.divide_by not in defined:
                issues.append(Diagnostic(code="UnknownDivisor", subject=eq.divide_by,
                                         message=f"{name} equation divides by a parameter no term carries"))

    for q, name in enumerate(spec.state_names):
        if q not in seen_states:
            issues.append(Diagnostic(code="MissingEquation", subject=name))
        if name not in spec.initial_conditions:
            issues.append(Diagnostic(code="MissingInitialCondition", subject=name))
    for name in spec.initial_conditions:
        if name not in spec.state_names:
            issues.append(Diagnostic(code="UnknownState", subject=name,
                                     message="initial condition for a state the model does not have"))
    return issues


def validate_plan(spec: ModelSpec, plan: StagePlan) -> list[Diagnostic]:
    issues = []
    wanted = spec.targets
    estimated: list[str] = []
    for i, stage in enumerate(plan.stages):
        label = stage.label or f"stage {i + 1}"
        if not stage.covariate_terms:
            issues.append(Diagnostic(code="EmptyStage", subject=label, message="stage has no covariate terms"))
        for prior in stage.priors:
            if prior not in estimated:
                issues.append(Diagnostic(code="UnknownPrior", subject=prior,
                                         message=f"{label} uses an estimate no earlier stage produces"))
        terms = [r.term for r in stage.response_terms] + [c.term for c in stage.covariate_terms]
        for term in terms:
            for q in sorted(q for q in _stage_term_states(term) if not 0 <= q < spec.s):
                issues.append(Diagnostic(code="StateIndexOutOfRange", subject=str(q),
                                         message=f"{label} references state {q}"))
        for target in stage.targets:
            if target in estimated:
                issues.append(Diagnostic(code="DuplicateTarget", subject=target))
            elif target not in wanted:
                issues.append(Diagnostic(code="UnknownTarget", subject=target,
                                         message=f"{label} estimates something the model does not define"))
            estimated.append(target)
    for target in wanted:
        if target not in estimated:
            issues.append(Diagnostic(code="MissingTarget", subject=target, message="no stage estimates it"))
    return issues


def validate_model(spec: ModelSpec) -> list[Diagnostic]:
    """
    Check the structural invariants of a model and its stage plan.

    Returns an empty list when everything holds; never raises.
    """
    if not spec.equations:
        return [Diagnostic(code="NoEquations", message="model has no state equations")]
    issues = _validate_equations(spec)
    if issues:
        return issues
    if spec.stages is not None:
        return validate_plan(spec, spec.stages)
    try:
        plan = default_stage_plan(spec)
    except MalformedStageError as e:
        return [Diagnostic(code="UnplannableModel", subject=spec.name, message=str(e))]
    return validate_plan(spec, plan)
