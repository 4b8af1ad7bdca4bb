"""
Model definition files (JSON) and observation files (CSV).

A model file looks like

    {
      "name": "fhn",
      "states": ["V", "R"],
      "equations": [
        {"state": "V", "terms": [{"param": "C", "expr": "V - V^3/3 + R", "sign": 1}]},
        {"state": "R", "divide_by": "C", "terms": [
            {"param": null, "expr": "V", "sign": -1},
            {"param": "a", "expr": "1"},
            {"param": "b", "expr": "R", "sign": -1}]}
      ],
      "initial_conditions": {"V": {"estimated": true}, "R": {"known": 1.0}},
      "stages": [...],
      "noise": {"V": {"kind": "gaussian", "sigma": 0.05}, "R": {"sigma": "estimate", "df": 3}}
    }

Stage entries mirror EstimationStage; stage terms are written as
{"kind": "observation", "state": "R"}, {"kind": "integral", "expr": "V"},
{"kind": "time"} or {"kind": "one"}.
"""
import json
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import BclsError, DataFileError, ModelFileError
from .library import BUILTIN_MODELS, MODEL_ALIASES, builtin_model
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
    StagePlan,
    StateEquation,
    TermSpec,
    TimeSeriesData,
    TimeTerm,
)
from .noise import NoiseConfig, SigmaSpec
from .parser import parse_expression
from .validation import validate_model


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TermDoc(_Doc):
    param: Optional[str] = None
    expr: str
    sign: Literal[1, -1] = 1
    correction: Optional[str] = None


class EquationDoc(_Doc):
    state: str
    transform: Literal["none", "log"] = "none"
    divide_by: Optional[str] = None
    terms: list[TermDoc]


class InitialConditionDoc(_Doc):
    known: Optional[float] = None
    estimated: bool = False

    @model_validator(mode="after")
    def _one_of(self):
        if (self.known is None) == (not self.estimated):
            raise ValueError('give exactly one of "known" or "estimated": true')
        return self


class ObservationDoc(_Doc):
    kind: Literal["observation"]
    state: str
    transform: Literal["none", "log"] = "none"


class IntegralDoc(_Doc):
    kind: Literal["integral"]
    expr: str
    corrected: bool = True
    correction: Optional[str] = None


class TimeDoc(_Doc):
    kind: Literal["time"]


class OneDoc(_Doc):
    kind: Literal["one"]


StageTermDoc = Union[ObservationDoc, IntegralDoc, TimeDoc, OneDoc]


class ResponseDoc(_Doc):
    coefficient: float = 1.0
    prior: Optional[str] = None
    term: StageTermDoc = Field(discriminator="kind")


class CovariateDoc(_Doc):
    target: str
    sign: Literal[1, -1] = 1
    term: StageTermDoc = Field(discriminator="kind")


class InterceptDoc(_Doc):
    estimates: str
    divide_by: Optional[str] = None
    exponentiate: bool = False


class StageDoc(_Doc):
    label: str = ""
    response_terms: list[ResponseDoc]
    covariate_terms: list[CovariateDoc]
    intercept: Optional[InterceptDoc] = None


class ModelDoc(_Doc):
    name: str = "custom"
    states: list[str] = Field(min_length=1)
    equations: list[EquationDoc]
    initial_conditions: dict[str, InitialConditionDoc] = Field(default_factory=dict)
    stages: Optional[list[StageDoc]] = None
    noise: dict[str, SigmaSpec] = Field(default_factory=dict)


class ModelDefinition(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: ModelSpec
    noise: NoiseConfig = NoiseConfig()


class _Builder:
    """Turns a validated document into domain records, collecting every problem."""

    def __init__(self, doc: ModelDoc):
        self.doc = doc
        self.states = doc.states
        self.problems: list[str] = []

    def expr(self, text: str, where: str):
        try:
            return parse_expression(text, self.states)
        except BclsError as e:
            self.problems.append(f"{where}: {e} in '{text}'")
            return None

    def state_index(self, name: str, where: str) -> int | None:
        if name not in self.states:
            self.problems.append(f"{where}: unknown state '{name}'")
            return None
        return self.states.index(name)

    def stage_term(self, doc, where: str):
        if isinstance(doc, ObservationDoc):
            q = self.state_index(doc.state, f"{where}.state")
            return None if q is None else ObservationTerm(state=q, transform=doc.transform)
        if isinstance(doc, IntegralDoc):
            basis = self.expr(doc.expr, f"{where}.expr")
            correction = self.expr(doc.correction, f"{where}.correction") if doc.correction else None
            if basis is None:
                return None
            return IntegralTerm(basis=basis, corrected=doc.corrected, correction=correction)
        if isinstance(doc, TimeDoc):
            return TimeTerm()
        return OneTerm()

    def build(self) -> ModelSpec | None:
        doc = self.doc
        if len(set(self.states)) != len(self.states):
            self.problems.append("states: duplicate state names")
        equations = []
        for i, eq in enumerate(doc.equations):
            where = f"equations[{i}]"
            q = self.state_index(eq.state, f"{where}.state")
            terms = []
            for j, term in enumerate(eq.terms):
                basis = self.expr(term.expr, f"{where}.terms[{j}].expr")
                correction = self.expr(term.correction, f"{where}.terms[{j}].correction") if term.correction else None
                if basis is not None:
                    terms.append(TermSpec(parameter_name=term.param, basis=basis, sign=term.sign, correction=correction))
            if q is not None:
                equations.append(StateEquation(state_index=q, terms=tuple(terms), transform=eq.transform,
                                               divide_by=eq.divide_by))

        initial_conditions = {}
        for name, ic in doc.initial_conditions.items():
            self.state_index(name, f"initial_conditions.{name}")
            initial_conditions[name] = InitialCondition(value=ic.known)
        for name in doc.noise:
            self.state_index(name, f"noise.{name}")

        plan = None
        if doc.stages is not None:
            stages = []
            for i, stage in enumerate(doc.stages):
                where = f"stages[{i}]"
                response = []
                for j, r in enumerate(stage.response_terms):
                    term = self.stage_term(r.term, f"{where}.response_terms[{j}].term")
                    if term is not None:
                        response.append(ResponseTerm(coefficient=Coefficient(value=r.coefficient, prior=r.prior), term=term))
                covariates = []
                for j, c in enumerate(stage.covariate_terms):
                    term = self.stage_term(c.term, f"{where}.covariate_terms[{j}].term")
                    if term is not None:
                        covariates.append(CovariateTerm(target=c.target, term=term, sign=c.sign))
                intercept = Intercept(**stage.intercept.model_dump()) if stage.intercept else None
                stages.append(EstimationStage(
                    label=stage.label or f"stage {i + 1}",
                    response_terms=tuple(response),
                    covariate_terms=tuple(covariates),
                    intercept=intercept,
                ))
            plan = StagePlan(stages=tuple(stages))

        if self.problems:
            return None
        return ModelSpec(
            name=doc.name,
            state_names=tuple(self.states),
            equations=tuple(equations),
            initial_conditions=initial_conditions,
            stages=plan,
        )


def _format_validation_error(error: ValidationError) -> list[str]:
    problems = []
    for item in error.errors():
        location = ".".join(str(part) for part in item["loc"])
        problems.append(f"{location}: {item['msg']}" if location else item["msg"])
    return problems


def parse_model_document(raw: dict, source: str = "<memory>") -> ModelDefinition:
    """Validate a decoded model document; raises ModelFileError listing every problem."""
    try:
        doc = ModelDoc.model_validate(raw)
    except ValidationError as e:
        raise ModelFileError(source, _format_validation_error(e)) from e
    builder = _Builder(doc)
    model = builder.build()
    if model is None:
        raise ModelFileError(source, builder.problems)
    diagnostics = validate_model(model)
    if diagnostics:
        raise ModelFileError(source, [str(d) for d in diagnostics])
    return ModelDefinition(model=model, noise=NoiseConfig(states=dict(doc.noise)))


def load_model_file(path: str | Path) -> ModelDefinition:
    path = Path(path)
    if not path.is_file():
        raise ModelFileError(str(path), ["file not found"])
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ModelFileError(str(path), [f"line {e.lineno} column {e.colno}: {e.msg}"]) from e
    return parse_model_document(raw, str(path))


BUILTIN_NOISE = {
    "logistic": NoiseConfig(states={"X": SigmaSpec(kind="lognormal", sigma="estimate")}),
    "fitzhugh_nagumo": NoiseConfig(states={
        "V": SigmaSpec(kind="gaussian", sigma="estimate"),
        "R": SigmaSpec(kind="gaussian", sigma="estimate"),
    }),
}


def load_model(name_or_path: str) -> ModelDefinition:
    """A built-in model by name (noise levels estimated from data), or a model file by path."""
    if name_or_path in BUILTIN_MODELS or name_or_path in MODEL_ALIASES:
        model = builtin_model(name_or_path)
        return ModelDefinition(model=model, noise=BUILTIN_NOISE[model.name])
    return load_model_file(name_or_path)


def read_series_csv(path: str | Path, state_names: Optional[list[str]] = None) -> TimeSeriesData:
    """
    Read a `t,<state...>` CSV. With `state_names`, columns are selected in that order.

    Raises DataFileError naming the path and, for bad cells, the file line.
    """
    path = Path(path)
    if not path.is_file():
        raise DataFileError(str(path), "file not found")
    try:
        frame = pd.read_csv(path, skipinitialspace=True, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataFileError(str(path), f"cannot parse CSV: {e}") from e
    frame.columns = [str(c).strip() for c in frame.columns]
    if not frame.columns.size or frame.columns[0] != "t":
        raise DataFileError(str(path), "first column must be 't'", line=1)
    columns = list(state_names) if state_names is not None else list(frame.columns[1:])
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise DataFileError(str(path), f"missing columns: {', '.join(missing)}", line=1)
    if frame.shape[0] == 0:
        raise DataFileError(str(path), "no data rows")

    # numeric columns keep the parser's round-trip values; text columns only locate the bad cell
    numeric = frame[["t", *columns]].apply(
        lambda col: col if pd.api.types.is_numeric_dtype(col) else pd.to_numeric(col, errors="coerce")
    ).astype(float)
    bad = numeric.isna() | ~np.isfinite(numeric.to_numpy(dtype=float))
    if bad.to_numpy().any():
        row, col = np.argwhere(bad.to_numpy())[0]
        column = numeric.columns[col]
        raise DataFileError(str(path), f"missing or non-numeric value in column '{column}'", line=int(row) + 2)
    times = numeric["t"].to_numpy(dtype=float)
    steps = np.diff(times)
    if np.any(steps <= 0):
        row = int(np.argmax(steps <= 0)) + 1
        raise DataFileError(str(path), "times must be strictly increasing", line=row + 2)
    return TimeSeriesData(
        times=times,
        observations=numeric[columns].to_numpy(dtype=float).T,
        state_names=tuple(columns),
    )


def write_series_csv(data: TimeSeriesData, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame({"t": data.times})
    for q, name in enumerate(data.state_names):
        frame[name] = data.observations[q]
    frame.to_csv(path, index=False, float_format="%.17g")
    return path
