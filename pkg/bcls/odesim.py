"""
Fixed-step RK4 solutions of linear-in-parameter ODE models, and noisy data from them.

Polynomial vector fields (every built-in model) run through a compiled kernel;
other fields fall back to vectorized numpy over the batch.
"""
from dataclasses import dataclass
from typing import Callable, Mapping, Optional, Sequence

import numba
import numpy as np

from .errors import ConfigError, MissingParameterError, NonFiniteStateError, NonPositiveDataError
from .expressions import compile_expression
from .logging_utils import get_logger
from .models import ModelSpec, TimeSeriesData, initial_condition_name
from .noise import NoiseModel
from .polynomial import PolynomialForm, polynomial_normal_form

logger = get_logger()

VectorField = Callable[[np.ndarray, Mapping[str, np.ndarray]], np.ndarray]


@dataclass
class Trajectory:
    """States X[q, i] at the requested times; `step` is the largest RK4 step taken."""
    times: np.ndarray
    states: np.ndarray
    state_names: tuple[str, ...]
    step: float
    substeps: int


def compile_vector_field(model: ModelSpec) -> VectorField:
    """
    Build f(x, params) = dx/dt for states x of shape (s, batch).

    Parameter values are arrays of shape (batch,) so one call advances a whole
    batch of parameter vectors. States without an equation stay constant.
    """
    equations = []
    for eq in model.equations:
        terms = [(t.sign, t.parameter_name, compile_expression(t.basis)) for t in eq.terms]
        equations.append((eq.state_index, terms, eq.divide_by))

    def field(x: np.ndarray, params: Mapping[str, np.ndarray]) -> np.ndarray:
        dx = np.zeros_like(x)
        for q, terms, divisor in equations:
            rhs = np.zeros(x.shape[1:])
            for sign, name, basis in terms:
                value = basis(x)
                rhs = rhs + (sign * value if name is None else sign * params[name] * value)
            dx[q] = rhs / params[divisor] if divisor is not None else rhs
        return dx

    return field


@dataclass(frozen=True)
class PolynomialField:
    """
    dx/dt as sums of monomials, for the compiled RK4 kernel.

    `degrees[m]` holds the exponents of monomial m; each entry of `terms` adds
    scale · β · monomial / D to dx_q/dt as (q, m, scale, β name, D name).
    """
    degrees: np.ndarray
    terms: tuple[tuple[int, int, float, Optional[str], Optional[str]], ...]

    def coefficients(self, params: Mapping[str, np.ndarray], batch: int, s: int) -> np.ndarray:
        """Coefficient tensor of shape (batch, s, monomials)."""
        out = np.zeros((batch, s, self.degrees.shape[0]))
        for q, m, scale, name, divisor in self.terms:
            value = np.full(batch, scale) if name is None else scale * params[name]
            if divisor is not None:
                value = value / params[divisor]
            out[:, q, m] += value
        return out


def polynomial_field(model: ModelSpec) -> PolynomialField | None:
    """The model's vector field as monomial tables; None when a basis is not polynomial."""
    index: dict[tuple[int, ...], int] = {}
    terms = []
    for eq in model.equations:
        for term in eq.terms:
            form = polynomial_normal_form(term.basis, model.s)
            if not isinstance(form, PolynomialForm):
                return None
            for monomial in form.monomials:
                m = index.setdefault(monomial.degrees, len(index))
                terms.append((eq.state_index, m, term.sign * monomial.coefficient, term.parameter_name, eq.divide_by))
    degrees = np.array(list(index), dtype=np.int64).reshape(len(index), model.s)
    return PolynomialField(degrees=degrees, terms=tuple(terms))


@numba.njit(cache=True, nogil=True, boundscheck=False)
def _polynomial_rate(coefficients, degrees, x, out):
    s = x.shape[0]
    for q in range(s):
        out[q] = 0.0
    for m in range(degrees.shape[0]):
        term = 1.0
        for j in range(s):
            for _ in range(degrees[m, j]):
                term *= x[j]
        for q in range(s):
            out[q] += coefficients[q, m] * term


@numba.njit(cache=True, nogil=True, boundscheck=False)
def _rk4_polynomial(coefficients, degrees, x0, times, substeps):
    s, batch = x0.shape
    n = times.shape[0]
    out = np.full((s, n, batch), np.nan)
    x = np.empty(s)
    stage = np.empty(s)
    k1 = np.empty(s)
    k2 = np.empty(s)
    k3 = np.empty(s)
    k4 = np.empty(s)
    for b in range(batch):
        c = coefficients[b]
        alive = True
        for q in range(s):
            x[q] = x0[q, b]
            out[q, 0, b] = x[q]
            alive = alive and np.isfinite(x[q])
        for i in range(1, n):
            if not alive:
                break
            h = (times[i] - times[i - 1]) / substeps
            for _ in range(substeps):
                _polynomial_rate(c, degrees, x, k1)
                for q in range(s):
                    stage[q] = x[q] + 0.5 * h * k1[q]
                _polynomial_rate(c, degrees, stage, k2)
                for q in range(s):
                    stage[q] = x[q] + 0.5 * h * k2[q]
                _polynomial_rate(c, degrees, stage, k3)
                for q in range(s):
                    stage[q] = x[q] + h * k3[q]
                _polynomial_rate(c, degrees, stage, k4)
                for q in range(s):
                    x[q] += (h / 6.0) * (k1[q] + 2.0 * k2[q] + 2.0 * k3[q] + k4[q])
            for q in range(s):
                alive = alive and np.isfinite(x[q])
            if alive:
                for q in range(s):
                    out[q, i, b] = x[q]
    return out


def integrate_batch(
    model: ModelSpec,
    params: Mapping[str, Sequence[float] | float],
    x0,
    times,
    substeps: int = 10,
    compiled: bool = True,
) -> np.ndarray:
    """
    RK4 for a batch of parameter vectors at once.

    Parameters:
    -----------

        - model (ModelSpec): The system.
        - params: Each parameter as a scalar or an array of shape (batch,).
        - x0: Initial states, shape (s,) or (s, batch).
        - times: Output grid; `substeps` RK4 steps are taken per interval.
        - compiled (bool): Use the compiled kernel when the field is polynomial.

    Returns:
    --------

        - np.ndarray of shape (s, n, batch). Members that blow up are NaN from the
          first non-finite value on.
    """
    t = np.ascontiguousarray(times, dtype=float)
    x = np.array(x0, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    raw = {name: np.atleast_1d(np.asarray(v, dtype=float)) for name, v in params.items()}
    batch = max([x.shape[1]] + [v.shape[0] for v in raw.values()])
    x = np.broadcast_to(x, (x.shape[0], batch)).copy()
    values = {name: np.broadcast_to(v, (batch,)) for name, v in raw.items()}

    polynomial = polynomial_field(model) if compiled else None
    if polynomial is not None:
        with np.errstate(all="ignore"):
            coefficients = polynomial.coefficients(values, batch, x.shape[0])
        return _rk4_polynomial(coefficients, polynomial.degrees, x, t, int(substeps))

    f = compile_vector_field(model)
    out = np.empty((x.shape[0], t.shape[0], batch))
    out[:, 0] = x
    alive = np.all(np.isfinite(x), axis=0)
    with np.errstate(all="ignore"):
        for i in range(1, t.shape[0]):
            h = (t[i] - t[i - 1]) / substeps
            for _ in range(substeps):
                k1 = f(x, values)
                k2 = f(x + 0.5 * h * k1, values)
                k3 = f(x + 0.5 * h * k2, values)
                k4 = f(x + h * k3, values)
                x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            alive &= np.all(np.isfinite(x), axis=0)
            x[:, ~alive] = np.nan
            out[:, i] = x
    return out


def solve_ode(model: ModelSpec, params: Mapping[str, float], x0: Sequence[float], times, substeps: int = 10) -> Trajectory:
    """
    Solve the model on `times` with `substeps` RK4 steps per output interval.

    Raises:
    -------

        - MissingParameterError: a parameter of the model has no value.
        - NonFiniteStateError: the solution blows up; carries the first bad time.
    """
    missing = [p for p in model.parameter_names if p not in params]
    if missing:
        raise MissingParameterError(missing)
    if substeps < 1:
        raise ConfigError([f"substeps must be at least 1, got {substeps}"])
    t = np.asarray(times, dtype=float)
    if t.ndim != 1 or t.shape[0] < 1 or np.any(np.diff(t) <= 0):
        raise ConfigError(["times must be a non-empty strictly increasing grid"])

    states = integrate_batch(model, {p: float(params[p]) for p in model.parameter_names}, x0, t, substeps)[:, :, 0]
    finite = np.all(np.isfinite(states), axis=0)
    if not np.all(finite):
        first = int(np.argmin(finite))
        logger.warning("Non-finite ODE state", model=model.name, t=float(t[first]), params=dict(params))
        raise NonFiniteStateError(float(t[first]))
    step = float(np.max(np.diff(t)) / substeps) if t.shape[0] > 1 else 0.0
    return Trajectory(times=t, states=states, state_names=tuple(model.state_names), step=step, substeps=substeps)


def initial_state(model: ModelSpec, values: Mapping[str, float]) -> np.ndarray:
    """x0 from known initial conditions, falling back to `values` (keyed v0, r0, ...)."""
    x0 = []
    missing = []
    for q, name in enumerate(model.state_names):
        known = model.initial_value(q)
        key = initial_condition_name(name)
        if key in values:
            x0.append(float(values[key]))
        elif known is not None:
            x0.append(known)
        else:
            missing.append(key)
            x0.append(np.nan)
    if missing:
        raise MissingParameterError(missing)
    return np.array(x0)


def add_noise(states: np.ndarray, noise: NoiseModel, rng: np.random.Generator) -> np.ndarray:
    """Noisy copy of X (shape (s, n)): X + ε or X·e^ε per state, ε ~ N(0, σ_q²)."""
    eps = rng.standard_normal(states.shape) * np.asarray(noise.sigmas)[:, None]
    y = np.empty_like(states)
    for q in range(states.shape[0]):
        if noise.kind(q) == "lognormal":
            y[q] = states[q] * np.exp(eps[q])
        else:
            y[q] = states[q] + eps[q]
    return y


def simulate_data(traj: Trajectory, noise: NoiseModel, seed: int) -> TimeSeriesData:
    """
    Observations of a trajectory under the noise model; deterministic given `seed`.

    Raises NonPositiveDataError when a log-normal state is not strictly positive.
    """
    for q, name in enumerate(traj.state_names):
        if noise.kind(q) == "lognormal" and np.any(traj.states[q] <= 0):
            raise NonPositiveDataError(f"Log-normal noise needs a positive trajectory; {name} is not")
    rng = np.random.default_rng(seed)
    return TimeSeriesData(
        times=traj.times.copy(),
        observations=add_noise(traj.states, noise, rng),
        state_names=traj.state_names,
    )
