"""
Monte Carlo experiments and bootstrap confidence intervals.

Replicate r of every scenario cell draws its noise from seed base + r, and results
are keyed by replicate index before aggregation, so summaries do not depend on
how replicates are scheduled across threads.
"""
import asyncio
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import BclsError, ConfigError, InsufficientDataError
from .estimator import BclsFit, BclsOptions, StageDesign, build_stage_design, fit_bcls, fit_stage
from .library import resolve_stage_plan
from .logging_utils import get_logger
from .models import ModelSpec, StagePlan, TimeSeriesData
from .nls import NlsConfig, NlsFit, fit_nls
from .noise import NoiseModel
from .odesim import Trajectory, initial_state, simulate_data, solve_ode

logger = get_logger()

CHUNK_SIZE = 100

MethodKind = Literal["bcls", "ls", "nls_truth", "nls_bcls", "nls_start"]


async def _gather_replicates(task: Callable[[int], Any], indices: Sequence[int], threads: int) -> dict[int, Any]:
    loop = asyncio.get_running_loop()
    results: dict[int, Any] = {}
    with ThreadPoolExecutor(max_workers=threads) as pool:
        for i in range(0, len(indices), CHUNK_SIZE):
            chunk = indices[i:i + CHUNK_SIZE]
            futures = [loop.run_in_executor(pool, task, r) for r in chunk]
            outcomes = await asyncio.gather(*futures, return_exceptions=True)
            results.update(zip(chunk, outcomes))
    return results


def run_replicates(task: Callable[[int], Any], count: int, threads: int = 1) -> dict[int, Any]:
    """
    Run task(r) for r in 0..count-1 on a thread pool.

    Returns a map replicate → result, where a failed replicate maps to its exception.
    """
    if threads <= 1:
        results = {}
        for r in range(count):
            try:
                results[r] = task(r)
            except Exception as e:  # noqa: BLE001
                results[r] = e
        return results
    return asyncio.run(_gather_replicates(task, list(range(count)), threads))


class MethodSpec(BaseModel):
    """
    One estimator in a Monte Carlo comparison.

    NLS kinds fit `free` (default: every target) and hold the rest at truth;
    `nls_start` starts from `start`, `nls_truth` from the truth and `nls_bcls`
    from the replicate's BCLS estimates.
    """
    model_config = ConfigDict(frozen=True)

    kind: MethodKind
    label: Optional[str] = None
    start: Optional[dict[str, float]] = None
    free: Optional[list[str]] = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "nls_start" and self.start:
            return "NLS(" + ",".join(f"{k}={v:g}" for k, v in self.start.items()) + ")"
        return {"bcls": "BCLS", "ls": "LS", "nls_truth": "NLS(truth)",
                "nls_bcls": "NLS(BCLS)", "nls_start": "NLS(start)"}[self.kind]

    @property
    def is_nls(self) -> bool:
        return self.kind.startswith("nls")


class TimeGrid(BaseModel):
    model_config = ConfigDict(frozen=True)

    start: float = 0.0
    end: float = 20.0
    points: int = Field(ge=2)

    @property
    def times(self) -> np.ndarray:
        return np.linspace(self.start, self.end, self.points)


class McConfig(BaseModel):
    """
    A Monte Carlo sweep: every noise level × every grid × `replicates` datasets.

    `truth` holds the true parameters and estimated initial conditions;
    `noise` supplies the noise kinds and `noise_levels` the per-state sigmas.
    """
    model_config = ConfigDict(frozen=True)

    name: str = "mc"
    model: ModelSpec
    truth: dict[str, float]
    noise: NoiseModel
    noise_levels: list[list[float]]
    grids: list[TimeGrid]
    replicates: int = Field(ge=1)
    methods: list[MethodSpec]
    base_seed: int = 0
    observed: Optional[list[str]] = None
    options: BclsOptions = BclsOptions()
    nls_overrides: dict[str, Any] = Field(default_factory=dict)
    plan: Optional[StagePlan] = None
    threads: int = Field(default=1, ge=1)
    substeps: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def _check(self):
        problems = []
        targets = self.model.targets
        missing = [t for t in targets if t not in self.truth]
        if missing:
            problems.append(f"truth is missing: {', '.join(missing)}")
        for method in self.methods:
            free = method.free or targets
            unknown = [p for p in free if p not in targets]
            if unknown:
                problems.append(f"{method.name}: unknown free parameters {unknown}")
            if method.kind == "nls_start":
                uncovered = [p for p in free if p not in (method.start or {})]
                if uncovered:
                    problems.append(f"{method.name}: start does not cover {', '.join(uncovered)}")
        if len(self.noise.states) != self.model.s:
            problems.append(f"noise model has {len(self.noise.states)} states, model has {self.model.s}")
        for sigmas in self.noise_levels:
            if len(sigmas) != self.model.s:
                problems.append(f"noise level {sigmas} needs {self.model.s} sigmas")
        if problems:
            raise ValueError("; ".join(problems))
        return self


@dataclass
class McRow:
    scenario: str
    method: str
    parameter: str
    truth: float
    mean: float
    mc_sd: float
    bias: float
    conv_rate: float
    used: int
    failed: int


@dataclass
class McSummary:
    rows: list[McRow] = field(default_factory=list)
    failures: dict[str, int] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {"scenario": r.scenario, "method": r.method, "param": r.parameter, "mean": r.mean,
                 "mc_sd": r.mc_sd, "bias": r.bias, "conv_rate": r.conv_rate}
                for r in self.rows
            ],
            columns=["scenario", "method", "param", "mean", "mc_sd", "bias", "conv_rate"],
        )

    def row(self, method: str, parameter: str, scenario: str | None = None) -> McRow:
        for r in self.rows:
            if r.method == method and r.parameter == parameter and (scenario is None or r.scenario == scenario):
                return r
        raise KeyError(f"no row for {method}/{parameter}")


@dataclass
class _Outcome:
    estimates: dict[str, float] | None
    converged: bool
    error: str | None = None


def _scenario_label(name: str, sigmas: Sequence[float], grid: TimeGrid) -> str:
    sigma = ",".join(f"{s:g}" for s in sigmas)
    return f"{name} sigma={sigma} n={grid.points}"


def _nls_config(config: McConfig, method: MethodSpec, start: dict[str, float]) -> NlsConfig:
    free = method.free or config.model.targets
    fixed = {k: v for k, v in config.truth.items() if k not in free}
    return NlsConfig(
        start={p: start[p] for p in free},
        fixed=fixed,
        free=list(free),
        observed=config.observed,
        substeps=config.substeps,
        **config.nls_overrides,
    )


def _run_methods(config: McConfig, data: TimeSeriesData, noise: NoiseModel) -> dict[str, _Outcome]:
    outcomes: dict[str, _Outcome] = {}
    bcls_fit: BclsFit | None = None
    bcls_error: str | None = None
    needs_bcls = any(m.kind in ("bcls", "nls_bcls") for m in config.methods)
    if needs_bcls:
        try:
            bcls_fit = fit_bcls(config.model, data, noise, config.plan, config.options)
        except BclsError as e:
            bcls_error = str(e)

    for method in config.methods:
        try:
            if method.kind == "bcls":
                outcomes[method.name] = (
                    _Outcome(dict(bcls_fit.estimates), True) if bcls_fit else _Outcome(None, False, bcls_error)
                )
            elif method.kind == "ls":
                options = BclsOptions(rule=config.options.rule, corrected=False)
                fit = fit_bcls(config.model, data, noise, config.plan, options)
                outcomes[method.name] = _Outcome(dict(fit.estimates), True)
            else:
                if method.kind == "nls_bcls":
                    if bcls_fit is None:
                        outcomes[method.name] = _Outcome(None, False, bcls_error)
                        continue
                    start = bcls_fit.estimates
                elif method.kind == "nls_truth":
                    start = config.truth
                else:
                    start = method.start or {}
                fit = fit_nls(config.model, data, noise, _nls_config(config, method, start))
                outcomes[method.name] = _Outcome(fit.estimates, fit.converged, None if fit.converged else fit.reason)
        except BclsError as e:
            outcomes[method.name] = _Outcome(None, False, str(e))
    return outcomes


def _aggregate(config: McConfig, scenario: str, results: dict[int, Any], summary: McSummary) -> None:
    R = config.replicates
    targets = config.model.targets
    for method in config.methods:
        outcomes = []
        for r in range(R):
            result = results[r]
            if isinstance(result, BaseException):
                outcomes.append(_Outcome(None, False, str(result)))
            else:
                outcomes.append(result[method.name])
        good = [o for o in outcomes if o.estimates is not None and o.converged]
        failed = R - len(good)
        summary.failures[method.name] = summary.failures.get(method.name, 0) + failed
        conv_rate = len(good) / R if method.is_nls else float("nan")
        parameters = (method.free or targets) if method.is_nls else targets
        for p in parameters:
            values = np.array([o.estimates[p] for o in good], dtype=float)
            truth = float(config.truth[p])
            mean = float(values.mean()) if values.size else float("nan")
            mc_sd = float(values.std(ddof=1)) if values.size > 1 else 0.0
            summary.rows.append(McRow(
                scenario=scenario, method=method.name, parameter=p, truth=truth, mean=mean,
                mc_sd=mc_sd, bias=mean - truth, conv_rate=conv_rate, used=int(values.size), failed=failed,
            ))


def run_monte_carlo(config: McConfig) -> McSummary:
    """
    Simulate, estimate and summarise every scenario cell.

    Per-replicate failures are counted, never raised. NLS means use converged
    replicates only; the convergence rate divides by the replicate count.
    """
    summary = McSummary()
    x0 = initial_state(config.model, config.truth)
    params = {p: config.truth[p] for p in config.model.parameter_names}
    for grid in config.grids:
        trajectory = solve_ode(config.model, params, x0, grid.times, config.substeps)
        for sigmas in config.noise_levels:
            noise = config.noise.with_sigmas(sigmas)
            scenario = _scenario_label(config.name, sigmas, grid)
            logger.info("Monte Carlo cell started", scenario=scenario, replicates=config.replicates)

            def replicate(r: int, noise=noise) -> dict[str, _Outcome]:
                data = simulate_data(trajectory, noise, config.base_seed + r)
                return _run_methods(config, data, noise)

            results = run_replicates(replicate, config.replicates, config.threads)
            _aggregate(config, scenario, results, summary)
            crashed = sum(isinstance(v, BaseException) for v in results.values())
            if crashed:
                logger.warning("Replicates raised", scenario=scenario, count=crashed)
    return summary


# Bootstrap ---------------------------------------------------------------------


class ConfidenceInterval(BaseModel):
    model_config = ConfigDict(frozen=True)

    parameter: str
    lower: float
    upper: float
    level: float = 0.95
    kind: Literal["parametric", "nonparametric"]
    B: int

    @model_validator(mode="after")
    def _ordered(self):
        if self.lower > self.upper:
            raise ValueError(f"{self.parameter}: lower bound exceeds upper bound")
        return self

    def covers(self, value: float) -> bool:
        return self.lower <= value <= self.upper


def percentile_interval(samples, level: float = 0.95) -> tuple[float, float]:
    """Percentile interval; B = 2 gives (min, max) and higher levels nest lower ones."""
    values = np.asarray(samples, dtype=float)
    alpha = 1.0 - level
    lower = float(np.quantile(values, alpha / 2.0, method="lower"))
    upper = float(np.quantile(values, 1.0 - alpha / 2.0, method="higher"))
    return lower, upper


def _intervals(draws: list[dict[str, float]], parameters: Sequence[str], level: float, kind) -> list[ConfidenceInterval]:
    if not draws:
        raise InsufficientDataError("No bootstrap replicate succeeded")
    intervals = []
    for p in parameters:
        lower, upper = percentile_interval([d[p] for d in draws], level)
        intervals.append(ConfidenceInterval(parameter=p, lower=lower, upper=upper, level=level, kind=kind, B=len(draws)))
    return intervals


def _successful(results: dict[int, Any], what: str) -> list[dict[str, float]]:
    draws = []
    for r in sorted(results):
        value = results[r]
        if isinstance(value, BaseException) or value is None:
            logger.warning(f"{what} replicate {r} failed: {value}")
            continue
        draws.append(value)
    return draws


def parametric_bootstrap(
    model: ModelSpec,
    fit: BclsFit | NlsFit,
    noise: NoiseModel,
    times,
    B: int,
    seed: int,
    level: float = 0.95,
    plan: Optional[StagePlan] = None,
    observed: Optional[list[str]] = None,
    threads: int = 1,
    substeps: int = 10,
    trajectory: Optional[Trajectory] = None,
) -> list[ConfidenceInterval]:
    """
    Re-simulate B datasets from the fitted model and re-estimate each one with the
    method that produced `fit`.

    Raises NonFiniteStateError when the ODE cannot be solved at the fitted values.
    """
    values = fit.estimates
    if trajectory is None:
        params = {p: values[p] for p in model.parameter_names}
        trajectory = solve_ode(model, params, initial_state(model, values), times, substeps)

    if isinstance(fit, NlsFit):
        config = NlsConfig(
            start={p: values[p] for p in fit.free},
            fixed={k: v for k, v in values.items() if k not in fit.free},
            free=list(fit.free),
            observed=observed,
            substeps=substeps,
        )
        parameters = list(fit.free)

        def estimate(data: TimeSeriesData):
            result = fit_nls(model, data, noise, config)
            return result.estimates if result.converged else None
    else:
        options = BclsOptions(rule=fit.rule, corrected=fit.corrected)
        parameters = model.targets

        def estimate(data: TimeSeriesData):
            return fit_bcls(model, data, noise, plan, options).estimates

    def replicate(b: int):
        return estimate(simulate_data(trajectory, noise, seed + b))

    draws = _successful(run_replicates(replicate, B, threads), "Parametric bootstrap")
    return _intervals(draws, parameters, level, "parametric")


def nonparametric_bootstrap(
    data: TimeSeriesData,
    model: ModelSpec,
    noise: NoiseModel,
    B: int,
    seed: int,
    level: float = 0.95,
    plan: Optional[StagePlan] = None,
    options: Optional[BclsOptions] = None,
    threads: int = 1,
) -> list[ConfidenceInterval]:
    """
    Residual bootstrap on the stage regressions.

    For each stage, the response is rebuilt with the replicate's earlier-stage
    estimates, its fitted residuals are swapped for residuals resampled with
    replacement, and the stage is re-solved.
    """
    options = options or BclsOptions()
    plan = plan or resolve_stage_plan(model)
    original = fit_bcls(model, data, noise, plan, options)

    def replicate(b: int) -> dict[str, float]:
        rng = np.random.default_rng(seed + b)
        priors: dict[str, float] = {}
        for i, stage in enumerate(plan.stages):
            base = original.stages[i]
            built = build_stage_design(stage, data, noise, priors, options.rule, options.corrected)
            resampled = rng.choice(base.residuals, size=base.residuals.shape[0], replace=True)
            response = built.response - base.residuals + resampled
            result = fit_stage(i, stage, StageDesign(response=response, design=built.design, labels=built.labels), priors)
            priors.update(result.estimates)
        return priors

    draws = _successful(run_replicates(replicate, B, threads), "Non-parametric bootstrap")
    return _intervals(draws, model.targets, level, "nonparametric")


@dataclass
class CoverageResult:
    parameter: str
    coverage: float
    outer: int
    level: float


def bootstrap_coverage(
    model: ModelSpec,
    truth: dict[str, float],
    noise: NoiseModel,
    times,
    outer: int,
    B: int,
    seed: int,
    level: float = 0.95,
    threads: int = 1,
    substeps: int = 10,
) -> list[CoverageResult]:
    """
    Fraction of parametric-bootstrap intervals covering the truth.

    Outer dataset o uses seed + o; its bootstrap draws use seeds from
    seed + outer + o·B onwards, so no seed is shared.
    """
    params = {p: truth[p] for p in model.parameter_names}
    trajectory = solve_ode(model, params, initial_state(model, truth), times, substeps)

    def outer_replicate(o: int) -> dict[str, bool]:
        data = simulate_data(trajectory, noise, seed + o)
        fit = fit_bcls(model, data, noise)
        intervals = parametric_bootstrap(model, fit, noise, times, B, seed + outer + o * B,
                                         level=level, substeps=substeps)
        return {ci.parameter: ci.covers(truth[ci.parameter]) for ci in intervals}

    results = run_replicates(outer_replicate, outer, threads)
    usable = [v for v in results.values() if not isinstance(v, BaseException)]
    rows = []
    for p in model.targets:
        hits = [v[p] for v in usable]
        coverage = float(np.mean(hits)) if hits else float("nan")
        rows.append(CoverageResult(parameter=p, coverage=coverage, outer=len(hits), level=level))
    return rows


@dataclass
class SweepRow:
    n: int
    parameter: str
    abs_bias: float
    mc_sd: float
    mc_se: float


def consistency_sweep(
    model: ModelSpec,
    truth: dict[str, float],
    noise: NoiseModel,
    n_values: Sequence[int],
    replicates: int,
    seed: int,
    t_start: float = 0.0,
    t_end: float = 20.0,
    options: Optional[BclsOptions] = None,
    threads: int = 1,
) -> list[SweepRow]:
    """BCLS |bias| and Monte Carlo SD per parameter at each grid size."""
    if not n_values or any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise ConfigError([f"n values must be increasing, got {list(n_values)}"])
    rows = []
    for n in n_values:
        config = McConfig(
            name="consistency",
            model=model,
            truth=truth,
            noise=noise,
            noise_levels=[noise.sigmas],
            grids=[TimeGrid(start=t_start, end=t_end, points=n)],
            replicates=replicates,
            methods=[MethodSpec(kind="bcls")],
            base_seed=seed,
            options=options or BclsOptions(),
            threads=threads,
        )
        for row in run_monte_carlo(config).rows:
            se = row.mc_sd / math.sqrt(row.used) if row.used else float("nan")
            rows.append(SweepRow(n=n, parameter=row.parameter, abs_bias=abs(row.bias), mc_sd=row.mc_sd, mc_se=se))
    return rows


def sweep_frame(rows: Sequence[SweepRow]) -> pd.DataFrame:
    return pd.DataFrame([vars(r) for r in rows], columns=["n", "parameter", "abs_bias", "mc_sd", "mc_se"])


def intervals_frame(intervals: Sequence[ConfidenceInterval]) -> pd.DataFrame:
    return pd.DataFrame(
        [{"param": ci.parameter, "lower": ci.lower, "upper": ci.upper, "kind": ci.kind, "level": ci.level}
         for ci in intervals],
        columns=["param", "lower", "upper", "kind", "level"],
    )
