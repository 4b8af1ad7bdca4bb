"""
Domain records for ODE models that are linear in their parameters.

A model is a list of state equations dx_q/dt = (1/D) Σ_k sign_k β_k h_k(x), where
each β_k is a named parameter (or absent for a fixed ±1 term) and D is an optional
parameter dividing the whole right-hand side. Estimation stages describe how the
integrated equations become linear regressions.
"""
from typing import TYPE_CHECKING, Annotated, Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from .errors import InvalidDataError, NonPositiveDataError
from .expressions import BasisExpr, referenced_states

if TYPE_CHECKING:
    from .noise import NoiseModel


class _Record(BaseModel):
    model_config = ConfigDict(frozen=True)


def initial_condition_name(state_name: str) -> str:
    """Target name of a state's initial condition: V → v0."""
    return f"{state_name.lower()}0"


class TermSpec(_Record):
    """One term sign·β·h of a state equation. parameter_name None means β = 1."""
    parameter_name: Optional[str] = None
    basis: BasisExpr
    sign: Literal[1, -1] = 1
    correction: Optional[BasisExpr] = None


class StateEquation(_Record):
    state_index: int
    terms: tuple[TermSpec, ...] = ()
    transform: Literal["none", "log"] = "none"
    divide_by: Optional[str] = None

    @property
    def parameter_names(self) -> list[str]:
        return [t.parameter_name for t in self.terms if t.parameter_name is not None]


class InitialCondition(_Record):
    """Known(value) when value is set, Estimated otherwise."""
    value: Optional[float] = None

    @property
    def estimated(self) -> bool:
        return self.value is None


# Stage terms -----------------------------------------------------------------


class ObservationTerm(_Record):
    kind: Literal["observation"] = "observation"
    state: int
    transform: Literal["none", "log"] = "none"


class IntegralTerm(_Record):
    """Cumulative integral of a basis evaluated on the observations."""
    kind: Literal["integral"] = "integral"
    basis: BasisExpr
    corrected: bool = True
    correction: Optional[BasisExpr] = None


class TimeTerm(_Record):
    """Elapsed time t_i - t_0, the integral of the constant basis 1."""
    kind: Literal["time"] = "time"


class OneTerm(_Record):
    kind: Literal["one"] = "one"


StageTerm = Annotated[
    Union[ObservationTerm, IntegralTerm, TimeTerm, OneTerm],
    Field(discriminator="kind"),
]


class Coefficient(_Record):
    """value, times the earlier estimate of `prior` when one is named."""
    value: float = 1.0
    prior: Optional[str] = None


class ResponseTerm(_Record):
    coefficient: Coefficient = Coefficient()
    term: StageTerm


class CovariateTerm(_Record):
    target: str
    term: StageTerm
    sign: Literal[1, -1] = 1


class Intercept(_Record):
    """
    Intercept column estimating `estimates`.

    The fitted intercept is divided by the prior estimate named in `divide_by`,
    and exponentiated when the stage response is on the log scale.
    """
    estimates: str
    divide_by: Optional[str] = None
    exponentiate: bool = False


class EstimationStage(_Record):
    response_terms: tuple[ResponseTerm, ...] = ()
    covariate_terms: tuple[CovariateTerm, ...] = ()
    intercept: Optional[Intercept] = None
    label: str = ""

    @property
    def targets(self) -> list[str]:
        names = [c.target for c in self.covariate_terms]
        if self.intercept is not None:
            names.append(self.intercept.estimates)
        return names

    @property
    def priors(self) -> list[str]:
        """Earlier estimates this stage reads, in first-use order."""
        names = [r.coefficient.prior for r in self.response_terms if r.coefficient.prior]
        if self.intercept is not None and self.intercept.divide_by:
            names.append(self.intercept.divide_by)
        return list(dict.fromkeys(names))


class StagePlan(_Record):
    stages: tuple[EstimationStage, ...] = ()

    @property
    def targets(self) -> list[str]:
        return [t for stage in self.stages for t in stage.targets]


class ModelSpec(_Record):
    name: str = "custom"
    state_names: tuple[str, ...]
    equations: tuple[StateEquation, ...] = ()
    initial_conditions: dict[str, InitialCondition] = Field(default_factory=dict)
    stages: Optional[StagePlan] = None

    @property
    def s(self) -> int:
        return len(self.state_names)

    @property
    def parameter_names(self) -> list[str]:
        names = [p for eq in self.equations for p in eq.parameter_names]
        names += [eq.divide_by for eq in self.equations if eq.divide_by]
        return list(dict.fromkeys(names))

    @property
    def estimated_initial_conditions(self) -> list[str]:
        return [
            initial_condition_name(name)
            for name in self.state_names
            if name in self.initial_conditions and self.initial_conditions[name].estimated
        ]

    @property
    def targets(self) -> list[str]:
        return self.parameter_names + self.estimated_initial_conditions

    def equation_for(self, state_index: int) -> StateEquation | None:
        for eq in self.equations:
            if eq.state_index == state_index:
                return eq
        return None

    def initial_value(self, state_index: int) -> float | None:
        ic = self.initial_conditions.get(self.state_names[state_index])
        return None if ic is None else ic.value

    def referenced_states(self) -> set[int]:
        found: set[int] = set()
        for eq in self.equations:
            for term in eq.terms:
                found |= referenced_states(term.basis)
                if term.correction is not None:
                    found |= referenced_states(term.correction)
        return found


class TimeSeriesData(BaseModel):
    """
    Observations y[q, i] of every state at every time t_i.

    `observations` has shape (s, n); row q follows `state_names[q]`.
    """
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    times: np.ndarray
    observations: np.ndarray
    state_names: tuple[str, ...]

    @field_validator("times", "observations", mode="before")
    @classmethod
    def _as_float_array(cls, value):
        return np.array(value, dtype=float)

    @property
    def n(self) -> int:
        return int(self.times.shape[0])

    def series(self, state: int | str) -> np.ndarray:
        q = self.state_names.index(state) if isinstance(state, str) else state
        return self.observations[q]

    def with_observations(self, observations: np.ndarray) -> "TimeSeriesData":
        return TimeSeriesData(times=self.times, observations=observations, state_names=self.state_names)

    def check(self, model: ModelSpec | None = None, noise: "NoiseModel | None" = None) -> "TimeSeriesData":
        """
        Enforce the data invariants and return self.

        Raises:
        -------

            - InvalidDataError: bad shapes, non-finite values, non-increasing times,
              or state names that differ from the model's.
            - NonPositiveDataError: a log-normal or log-transformed state with a value ≤ 0.
        """
        if self.times.ndim != 1 or self.times.shape[0] < 1:
            raise InvalidDataError("times must be a non-empty 1-D array")
        if self.observations.ndim != 2 or self.observations.shape != (len(self.state_names), self.n):
            raise InvalidDataError(
                f"observations must have shape ({len(self.state_names)}, {self.n}), "
                f"got {self.observations.shape}"
            )
        if not np.all(np.isfinite(self.times)) or not np.all(np.isfinite(self.observations)):
            raise InvalidDataError("data contains missing or non-finite values")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidDataError("times must be strictly increasing")

        positive: set[int] = set()
        if model is not None:
            if tuple(model.state_names) != tuple(self.state_names):
                raise InvalidDataError(
                    f"data states {list(self.state_names)} do not match model states {list(model.state_names)}"
                )
            positive |= {eq.state_index for eq in model.equations if eq.transform == "log"}
        if noise is not None:
            positive |= {q for q in range(len(self.state_names)) if noise.kind(q) == "lognormal"}
        for q in sorted(positive):
            if np.any(self.observations[q] <= 0):
                raise NonPositiveDataError(f"state {self.state_names[q]} has non-positive observations")
        return self
