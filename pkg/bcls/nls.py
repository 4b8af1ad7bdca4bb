"""
Nonlinear least squares over the ODE solution and SSE surfaces over
two-parameter grids.

Two optimizers share one residual function: Levenberg-Marquardt (the default)
and a step-halving Gauss-Newton with a relative-offset convergence test, which
gives up the way R's `nls` does and is what the preset studies use.
"""
import math
from dataclasses import dataclass, field
from typing import Literal, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import MissingParameterError
from .logging_utils import get_logger
from .models import ModelSpec, TimeSeriesData, initial_condition_name
from .noise import NoiseModel
from .odesim import integrate_batch

logger = get_logger()

Algorithm = Literal["levenberg-marquardt", "gauss-newton"]


class NlsConfig(BaseModel):
    """
    Start values and stopping rules.

    `free` lists the values being fitted (default: every key of `start`); all other
    model parameters and estimated initial conditions come from `fixed`.
    `observed` restricts the residual to some states (default: all).

    Levenberg-Marquardt uses `tolerance` (relative SSE decrease) and the damping
    fields. Gauss-Newton uses `offset_tolerance`, `min_factor`, `scale_offset` and
    `rank_tolerance`. Both use `max_iterations` and `fd_step`.
    """
    model_config = ConfigDict(frozen=True)

    start: dict[str, float]
    fixed: dict[str, float] = Field(default_factory=dict)
    free: Optional[list[str]] = None
    observed: Optional[list[str]] = None
    algorithm: Algorithm = "levenberg-marquardt"
    max_iterations: int = Field(default=200, gt=0)
    tolerance: float = Field(default=1e-10, gt=0)
    damping: float = Field(default=1e-3, gt=0)
    increase: float = Field(default=10.0, gt=1)
    decrease: float = Field(default=0.1, gt=0, lt=1)
    fd_step: float = Field(default=1e-6, gt=0)
    substeps: int = Field(default=10, ge=1)
    max_nonfinite: int = Field(default=8, ge=1)
    max_damping: float = Field(default=1e12, gt=0)
    gradient_tolerance: float = Field(default=1e-6, gt=0)
    offset_tolerance: float = Field(default=1e-5, gt=0)
    min_factor: float = Field(default=1.0 / 1024.0, gt=0, le=1)
    scale_offset: float = Field(default=0.0, ge=0)
    rank_tolerance: float = Field(default=1e-7, gt=0)

    @model_validator(mode="after")
    def _free_have_starts(self):
        missing = [p for p in self.free_names if p not in self.start]
        if missing:
            raise ValueError(f"no start value for: {', '.join(missing)}")
        return self

    @property
    def free_names(self) -> list[str]:
        return list(self.free) if self.free is not None else list(self.start)


@dataclass
class NlsFit:
    estimates: dict[str, float]
    converged: bool
    iterations: int
    sse: float
    reason: str
    free: list[str] = field(default_factory=list)


def _observed_indices(model: ModelSpec, observed: Sequence[str] | None) -> list[int]:
    if observed is None:
        return list(range(model.s))
    return [model.state_names.index(name) for name in observed]


class ResidualFunction:
    """
    Weighted residuals (y - X)/σ stacked over observed states, for a batch of
    parameter vectors. Log-transformed equations use log y - log X. Noise-free
    states get unit weight.
    """

    def __init__(self, model: ModelSpec, data: TimeSeriesData, noise: NoiseModel,
                 observed: Sequence[str] | None = None, substeps: int = 10):
        self.model = model
        self.data = data
        self.substeps = substeps
        self.states = _observed_indices(model, observed)
        self.log_states = {eq.state_index for eq in model.equations if eq.transform == "log"}
        self.weights = np.array([1.0 / noise.sigma(q) if noise.sigma(q) > 0 else 1.0 for q in self.states])
        self.required = model.parameter_names + model.estimated_initial_conditions

    def __call__(self, values: Mapping[str, np.ndarray | float]) -> np.ndarray:
        """Residual matrix of shape (len(observed) * n, batch)."""
        missing = [name for name in self.required if name not in values]
        if missing:
            raise MissingParameterError(missing)
        params = {p: values[p] for p in self.model.parameter_names}
        batch = max(np.atleast_1d(np.asarray(v)).shape[0] for v in values.values())
        x0 = []
        for q, name in enumerate(self.model.state_names):
            key = initial_condition_name(name)
            known = self.model.initial_value(q)
            value = values[key] if key in values else known
            x0.append(np.broadcast_to(np.asarray(value, dtype=float), (batch,)))
        states = integrate_batch(self.model, params, np.array(x0), self.data.times, self.substeps)

        blocks = []
        with np.errstate(all="ignore"):
            for weight, q in zip(self.weights, self.states):
                y = self.data.observations[q][:, None]
                x = states[q]
                if q in self.log_states:
                    x = np.where(x > 0, x, np.nan)
                    blocks.append(weight * (np.log(y) - np.log(x)))
                else:
                    blocks.append(weight * (y - x))
        return np.concatenate(blocks, axis=0)


def _sse(residuals: np.ndarray) -> np.ndarray:
    sse = np.sum(residuals**2, axis=0)
    return np.where(np.all(np.isfinite(residuals), axis=0), sse, np.inf)


def weighted_sse(
    model: ModelSpec,
    values: Mapping[str, float],
    data: TimeSeriesData,
    noise: NoiseModel,
    observed: Sequence[str] | None = None,
    substeps: int = 10,
) -> float:
    """Σ_q Σ_i (y_qi - X_q(t_i))² / σ_q²; +inf when the solution is not finite."""
    residuals = ResidualFunction(model, data, noise, observed, substeps)(values)
    return float(_sse(residuals)[0])


class LeastSquaresProblem:
    """The weighted residuals as a function of the free values alone."""

    def __init__(self, residual: ResidualFunction, free: Sequence[str], base: Mapping[str, float]):
        self.residual = residual
        self.free = list(free)
        self.base = dict(base)

    def residuals(self, thetas: np.ndarray) -> np.ndarray:
        """Residual columns for free-value columns `thetas` of shape (k, batch)."""
        values: dict[str, np.ndarray | float] = dict(self.base)
        values.update({name: thetas[j] for j, name in enumerate(self.free)})
        return self.residual(values)

    def jacobian(self, theta: np.ndarray, r: np.ndarray, fd_step: float) -> np.ndarray:
        """Forward differences with relative steps; every column from one batched solve."""
        h = fd_step * np.where(theta != 0.0, np.abs(theta), 1.0)
        perturbed = self.residuals(theta[:, None] + np.diag(h))
        return (perturbed - r[:, None]) / h[None, :]

    def estimates(self, theta: np.ndarray) -> dict[str, float]:
        values = dict(self.base)
        values.update({name: float(theta[j]) for j, name in enumerate(self.free)})
        return values


def fit_nls(model: ModelSpec, data: TimeSeriesData, noise: NoiseModel, config: NlsConfig) -> NlsFit:
    """
    Fit the free values by nonlinear least squares. Never raises: failures come
    back as an unconverged NlsFit whose `reason` says why.

    Termination reasons:

        - "tolerance": converged (relative SSE decrease, or relative offset for Gauss-Newton).
        - "gradient": damping saturated at a stationary point (converged).
        - "stalled": damping saturated away from a stationary point.
        - "step-factor": Gauss-Newton halved its step below `min_factor`.
        - "singular-gradient": the Jacobian lost rank.
        - "diverged": non-finite ODE solutions.
        - "max-iterations": iteration budget used up.
        - "missing-values": a model value is neither free nor fixed.
    """
    residual = ResidualFunction(model, data, noise, config.observed, config.substeps)
    free = config.free_names
    base = {**config.start, **config.fixed}
    base = {k: v for k, v in base.items() if k not in free}
    problem = LeastSquaresProblem(residual, free, base)

    def finish(theta, sse, converged, iterations, reason) -> NlsFit:
        log = logger.info if converged else logger.warning
        log("NLS finished", model=model.name, algorithm=config.algorithm, converged=converged,
            reason=reason, iterations=iterations, sse=float(sse))
        return NlsFit(estimates=problem.estimates(theta), converged=converged, iterations=iterations,
                      sse=float(sse), reason=reason, free=list(free))

    theta = np.array([config.start[name] for name in free], dtype=float)
    missing = [name for name in residual.required if name not in free and name not in base]
    if missing:
        logger.warning("NLS values missing", model=model.name, missing=missing)
        return finish(theta, np.inf, False, 0, "missing-values")

    r = problem.residuals(theta[:, None])[:, 0]
    sse = float(_sse(r[:, None])[0])
    if not np.isfinite(sse):
        return finish(theta, np.inf, False, 0, "diverged")
    if config.algorithm == "gauss-newton":
        return _gauss_newton(problem, theta, r, sse, config, finish)
    return _levenberg_marquardt(problem, theta, r, sse, config, finish)


def _levenberg_marquardt(problem: LeastSquaresProblem, theta, r, sse, config: NlsConfig, finish) -> NlsFit:
    """
    Steps solve (JᵀJ + λ·diag(JᵀJ)) δ = -Jᵀr. A step is taken only when it lowers
    the SSE; λ then shrinks by `decrease`, otherwise grows by `increase`.
    """
    lam = config.damping
    nonfinite = 0
    for iteration in range(1, config.max_iterations + 1):
        if sse == 0.0:
            return finish(theta, sse, True, iteration - 1, "tolerance")
        J = problem.jacobian(theta, r, config.fd_step)
        if not np.all(np.isfinite(J)):
            nonfinite += 1
            if nonfinite >= config.max_nonfinite:
                return finish(theta, sse, False, iteration, "diverged")
            J = np.nan_to_num(J, nan=0.0, posinf=0.0, neginf=0.0)

        g = J.T @ r
        A = J.T @ J
        scale = np.maximum(np.diag(A), np.finfo(float).tiny)
        while True:
            try:
                delta = np.linalg.solve(A + lam * np.diag(scale), -g)
            except np.linalg.LinAlgError:
                delta = None
            if delta is not None:
                trial = theta + delta
                r_trial = problem.residuals(trial[:, None])[:, 0]
                sse_trial = float(_sse(r_trial[:, None])[0])
                if not np.isfinite(sse_trial):
                    nonfinite += 1
                    if nonfinite >= config.max_nonfinite:
                        return finish(theta, sse, False, iteration, "diverged")
                elif sse_trial < sse:
                    relative = (sse - sse_trial) / sse
                    theta, r, sse = trial, r_trial, sse_trial
                    lam = max(lam * config.decrease, 1e-15)
                    if relative < config.tolerance:
                        return finish(theta, sse, True, iteration, "tolerance")
                    break
            lam *= config.increase
            if lam > config.max_damping:
                if np.max(np.abs(g)) <= config.gradient_tolerance * (1.0 + sse):
                    return finish(theta, sse, True, iteration, "gradient")
                return finish(theta, sse, False, iteration, "stalled")
    return finish(theta, sse, False, config.max_iterations, "max-iterations")


def relative_offset(qtr: np.ndarray, sse: float, rows: int, scale_offset: float = 0.0) -> float:
    """
    sqrt(|Q₁ᵀr|² / (scale_offset²·(N - k) + |Q₂ᵀr|²)): the size of the Gauss-Newton
    increment relative to the residual left over, for `qtr` = Q₁ᵀr of length k.
    """
    projected = float(qtr @ qtr)
    denominator = scale_offset**2 * (rows - qtr.shape[0]) + max(sse - projected, 0.0)
    if denominator <= 0.0:
        return 0.0 if projected == 0.0 else math.inf
    return math.sqrt(projected / denominator)


def _gauss_newton(problem: LeastSquaresProblem, theta, r, sse, config: NlsConfig, finish) -> NlsFit:
    """
    Gauss-Newton increments from a pivoted QR of the Jacobian. A full step is tried
    first; the step factor halves until the SSE does not increase and doubles
    (up to 1) after each accepted step.
    """
    factor = 1.0
    for iteration in range(config.max_iterations):
        if sse == 0.0:
            return finish(theta, sse, True, iteration, "tolerance")
        J = problem.jacobian(theta, r, config.fd_step)
        if not np.all(np.isfinite(J)):
            return finish(theta, sse, False, iteration, "diverged")
        Q, R, pivot = scipy.linalg.qr(J, mode="economic", pivoting=True)
        norms = np.linalg.norm(J[:, pivot], axis=0)
        if np.any(np.abs(np.diag(R)) <= config.rank_tolerance * norms):
            return finish(theta, sse, False, iteration, "singular-gradient")
        qtr = Q.T @ r
        if relative_offset(qtr, sse, r.shape[0], config.scale_offset) <= config.offset_tolerance:
            return finish(theta, sse, True, iteration, "tolerance")

        increment = np.empty_like(theta)
        increment[pivot] = -scipy.linalg.solve_triangular(R, qtr)
        while factor >= config.min_factor:
            trial = theta + factor * increment
            r_trial = problem.residuals(trial[:, None])[:, 0]
            sse_trial = float(_sse(r_trial[:, None])[0])
            if sse_trial <= sse:
                theta, r, sse = trial, r_trial, sse_trial
                factor = min(2.0 * factor, 1.0)
                break
            factor /= 2.0
        else:
            return finish(theta, sse, False, iteration + 1, "step-factor")
    return finish(theta, sse, False, config.max_iterations, "max-iterations")


class SurfaceAxis(BaseModel):
    model_config = ConfigDict(frozen=True)

    parameter: str
    lo: float
    hi: float
    steps: int = Field(ge=1)

    @model_validator(mode="after")
    def _non_degenerate(self):
        if self.steps > 1 and not self.hi > self.lo:
            raise ValueError(f"axis {self.parameter}: hi must exceed lo")
        return self

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.steps)


@dataclass
class SseSurface:
    """SSE on a grid; rows follow axis1, columns axis2."""
    axis1: SurfaceAxis
    axis2: SurfaceAxis
    sse: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        a, b = np.meshgrid(self.axis1.values, self.axis2.values, indexing="ij")
        return pd.DataFrame({
            self.axis1.parameter: a.ravel(),
            self.axis2.parameter: b.ravel(),
            "sse": self.sse.ravel(),
        })


def sse_surface(
    model: ModelSpec,
    data: TimeSeriesData,
    noise: NoiseModel,
    axis1: SurfaceAxis,
    axis2: SurfaceAxis,
    fixed: Mapping[str, float],
    observed: Sequence[str] | None = None,
    substeps: int = 10,
) -> SseSurface:
    """weighted_sse on the Cartesian grid of two axes, others held at `fixed`."""
    a, b = np.meshgrid(axis1.values, axis2.values, indexing="ij")
    values = dict(fixed)
    values[axis1.parameter] = a.ravel()
    values[axis2.parameter] = b.ravel()
    residuals = ResidualFunction(model, data, noise, observed, substeps)(values)
    sse = _sse(residuals).reshape(a.shape)
    logger.info("SSE surface computed", model=model.name, cells=int(sse.size),
                finite=int(np.isfinite(sse).sum()))
    return SseSurface(axis1=axis1, axis2=axis2, sse=sse)


def local_minima(surface: SseSurface) -> list[tuple[float, float, float]]:
    """Interior cells no larger than any of their 8 neighbours, best first."""
    sse = surface.sse
    v1, v2 = surface.axis1.values, surface.axis2.values
    found = []
    for i in range(1, sse.shape[0] - 1):
        for j in range(1, sse.shape[1] - 1):
            centre = sse[i, j]
            if not np.isfinite(centre):
                continue
            window = sse[i - 1:i + 2, j - 1:j + 2]
            if np.all(centre <= window):
                found.append((float(v1[i]), float(v2[j]), float(centre)))
    return sorted(found, key=lambda cell: cell[2])
