"""
Observation-noise models and bias-corrected basis functions.

For a basis h and noisy observations Y of the states X, a corrected basis h*
satisfies E[h*(Y)] = h(X). For polynomial bases this is exact:

- additive Gaussian noise: y^n → p_n(y; σ) = σ^n He_n(y/σ), with E[p_n(X + ε)] = X^n;
- log-normal noise (log Y = log X + ε): y^n → e^{-n²σ²/2} y^n, since E[Y^n] = X^n e^{n²σ²/2}.

States are independent, so monomials correct factor by factor.
"""
from typing import Literal, Optional, Sequence

import numpy as np
from numpy.polynomial import hermite_e
from pydantic import BaseModel, ConfigDict, Field

from .errors import (
    ConfigError,
    InsufficientDataError,
    NonPolynomialUnderGaussianNoise,
    NonPositiveDataError,
    UnsupportedLogNormalForm,
)
from .expressions import BasisExpr, compile_expression, format_expression, referenced_states
from .logging_utils import get_logger
from .models import TimeSeriesData
from .polynomial import PolynomialForm, polynomial_normal_form

logger = get_logger()

NoiseKind = Literal["gaussian", "lognormal"]
Derivation = Literal["identity", "hermite-moment", "lognormal-moment", "mixed-moment", "user-supplied"]


class StateNoise(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: NoiseKind = "gaussian"
    sigma: float = Field(default=0.0, ge=0.0)


class NoiseModel(BaseModel):
    """Independent per-state noise, one entry per state in model order."""
    model_config = ConfigDict(frozen=True)

    states: tuple[StateNoise, ...]

    @classmethod
    def gaussian(cls, *sigmas: float) -> "NoiseModel":
        return cls(states=tuple(StateNoise(kind="gaussian", sigma=s) for s in sigmas))

    @classmethod
    def lognormal(cls, *sigmas: float) -> "NoiseModel":
        return cls(states=tuple(StateNoise(kind="lognormal", sigma=s) for s in sigmas))

    def sigma(self, q: int) -> float:
        return self.states[q].sigma

    def kind(self, q: int) -> NoiseKind:
        return self.states[q].kind

    @property
    def sigmas(self) -> list[float]:
        return [s.sigma for s in self.states]

    def with_sigmas(self, sigmas: Sequence[float]) -> "NoiseModel":
        if len(sigmas) != len(self.states):
            raise ConfigError([f"expected {len(self.states)} sigmas, got {len(sigmas)}"])
        return NoiseModel(
            states=tuple(StateNoise(kind=s.kind, sigma=float(v)) for s, v in zip(self.states, sigmas))
        )


def moment_adjusted_polynomial(n: int, sigma: float) -> np.ndarray:
    """
    Coefficients (lowest degree first) of p_n(y; σ).

    p_0 = 1, p_1 = y, p_n = y p_{n-1} - (n-1) σ² p_{n-2}; e.g. p_3 = y³ - 3σ²y.
    """
    he = hermite_e.herme2poly([0.0] * n + [1.0])
    return np.array([he[k] * sigma ** (n - k) for k in range(n + 1)], dtype=float)


class CorrectedBasis(BaseModel):
    """
    A basis paired with its bias-corrected form.

    Automatic corrections are kept as an expanded polynomial in the observations;
    user-supplied ones (and identities of non-polynomial bases) as an expression.
    """
    model_config = ConfigDict(frozen=True)

    original: BasisExpr
    polynomial: Optional[PolynomialForm] = None
    expression: Optional[BasisExpr] = None
    derivation: Derivation

    def evaluate(self, observations) -> float | np.ndarray:
        obs = np.asarray(observations, dtype=float)
        if self.derivation == "identity":
            # same evaluator as the uncorrected basis, so σ = 0 reproduces it exactly
            value = compile_expression(self.original)(obs)
        elif self.polynomial is not None:
            return self.polynomial.evaluate(obs)
        else:
            value = compile_expression(self.expression)(obs)
        if obs.ndim <= 1:
            return float(value)
        return np.broadcast_to(np.asarray(value, dtype=float), obs.shape[1:]).copy()

    def describe(self, state_names: Sequence[str]) -> str:
        if self.polynomial is not None:
            return format_expression(self.polynomial.to_expression(state_names))
        return format_expression(self.expression)


def _factor(kind: NoiseKind, sigma: float, degree: int) -> np.ndarray:
    if sigma == 0.0 or degree == 0:
        coefficients = np.zeros(degree + 1)
        coefficients[degree] = 1.0
        return coefficients
    if kind == "gaussian":
        return moment_adjusted_polynomial(degree, sigma)
    coefficients = np.zeros(degree + 1)
    coefficients[degree] = np.exp(-(degree**2) * sigma**2 / 2.0)
    return coefficients


def correct_basis(expr: BasisExpr, noise: NoiseModel, correction: BasisExpr | None = None) -> CorrectedBasis:
    """
    Derive h* for a basis under a noise model.

    Parameters:
    -----------

        - expr (BasisExpr): The basis h.
        - noise (NoiseModel): Noise of every model state.
        - correction (BasisExpr | None): User-supplied h*, used as is when given.

    Returns:
    --------

        - CorrectedBasis: identity when every state h reads is noise-free.

    Raises:
    -------

        - NonPolynomialUnderGaussianNoise: h is not polynomial and reads a noisy Gaussian state.
        - UnsupportedLogNormalForm: h is not polynomial and reads only log-normal states.
    """
    s = len(noise.states)
    if correction is not None:
        form = polynomial_normal_form(correction, s)
        return CorrectedBasis(
            original=expr,
            polynomial=form if isinstance(form, PolynomialForm) else None,
            expression=correction,
            derivation="user-supplied",
        )

    form = polynomial_normal_form(expr, s)
    polynomial = form if isinstance(form, PolynomialForm) else None
    noisy = sorted(q for q in referenced_states(expr) if noise.sigma(q) > 0.0)
    if not noisy:
        return CorrectedBasis(original=expr, polynomial=polynomial, expression=expr, derivation="identity")

    text = format_expression(expr)
    if polynomial is None:
        if any(noise.kind(q) == "gaussian" for q in noisy):
            raise NonPolynomialUnderGaussianNoise(
                f"Basis '{text}' is not polynomial ({form.reason}); supply a correction"
            )
        raise UnsupportedLogNormalForm(f"Basis '{text}' is not a sum of monomials ({form.reason})")

    terms: dict[tuple[int, ...], float] = {}
    for monomial in polynomial.monomials:
        expanded = {(0,) * s: monomial.coefficient}
        for q, degree in enumerate(monomial.degrees):
            factor = _factor(noise.kind(q), noise.sigma(q), degree)
            nxt: dict[tuple[int, ...], float] = {}
            for degrees, c in expanded.items():
                for k, fk in enumerate(factor):
                    if fk == 0.0:
                        continue
                    d = list(degrees)
                    d[q] += k
                    key = tuple(d)
                    nxt[key] = nxt.get(key, 0.0) + c * fk
            expanded = nxt
        for degrees, c in expanded.items():
            terms[degrees] = terms.get(degrees, 0.0) + c

    kinds = {noise.kind(q) for q in noisy}
    if kinds == {"gaussian"}:
        derivation = "hermite-moment"
    elif kinds == {"lognormal"}:
        derivation = "lognormal-moment"
    else:
        derivation = "mixed-moment"
    return CorrectedBasis(
        original=expr,
        polynomial=PolynomialForm.from_mapping(s, terms),
        derivation=derivation,
    )


def corrected_evaluate(cb: CorrectedBasis, obs_vector) -> float | np.ndarray:
    """h* at an observation vector of length s, or at each column of an (s, n) array."""
    return cb.evaluate(obs_vector)


def natural_spline_basis(x: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """
    Restricted (natural) cubic spline design: [1, x, s_1 .. s_{K-2}].

    Linear beyond the boundary knots. Nonlinear columns are scaled by
    (k_K - k_1)² to keep them on the scale of x.
    """
    x = np.asarray(x, dtype=float)
    k = np.asarray(knots, dtype=float)
    K = k.size
    cols = [np.ones_like(x), x]

    def d(j: int) -> np.ndarray:
        return np.maximum(x - k[j], 0.0) ** 3

    span = k[K - 1] - k[K - 2]
    scale = (k[K - 1] - k[0]) ** 2
    for j in range(K - 2):
        col = d(j) - d(K - 2) * (k[K - 1] - k[j]) / span + d(K - 1) * (k[K - 2] - k[j]) / span
        cols.append(col / scale)
    return np.column_stack(cols)


def estimate_sigma(series: TimeSeriesData, state: int | str, smoother_df: int = 3, kind: NoiseKind = "gaussian") -> float:
    """
    Residual noise level of one state around a natural cubic spline smooth.

    The spline has `smoother_df` degrees of freedom: boundary knots at the ends of
    the time range and `smoother_df - 1` interior knots at equally spaced
    quantiles of t. Log-normal states are smoothed on the log scale.

    Returns sqrt(RSS / (n - smoother_df)).
    """
    q = series.state_names.index(state) if isinstance(state, str) else state
    name = series.state_names[q]
    y = np.asarray(series.series(q), dtype=float)
    n = y.shape[0]
    if smoother_df < 1:
        raise InsufficientDataError(f"smoother_df must be at least 1, got {smoother_df}")
    if n < smoother_df + 2:
        raise InsufficientDataError(
            f"Need at least {smoother_df + 2} observations of {name} for df={smoother_df}, got {n}"
        )
    if kind == "lognormal":
        if np.any(y <= 0):
            raise NonPositiveDataError(f"State {name} has non-positive observations; cannot take logs")
        y = np.log(y)

    t = np.asarray(series.times, dtype=float)
    u = (t - t[0]) / (t[-1] - t[0])
    knots = np.quantile(u, np.linspace(0.0, 1.0, smoother_df + 1))
    design = natural_spline_basis(u, knots)
    coefficients, *_ = np.linalg.lstsq(design, y, rcond=None)
    rss = float(np.sum((y - design @ coefficients) ** 2))
    sigma = float(np.sqrt(rss / (n - smoother_df)))
    logger.info("Estimated noise level", state=name, df=smoother_df, kind=kind, sigma=sigma)
    return sigma


class SigmaSpec(BaseModel):
    """Noise entry of a model file: a fixed sigma or "estimate" with a smoother df."""
    model_config = ConfigDict(frozen=True)

    kind: NoiseKind = "gaussian"
    sigma: float | Literal["estimate"] = 0.0
    df: int = Field(default=3, ge=1)


class NoiseConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    states: dict[str, SigmaSpec] = Field(default_factory=dict)

    @property
    def needs_data(self) -> bool:
        return any(spec.sigma == "estimate" for spec in self.states.values())


def resolve_noise(config: NoiseConfig, state_names: Sequence[str], data: TimeSeriesData | None = None) -> NoiseModel:
    """
    Turn a noise config into a NoiseModel, estimating sigmas marked "estimate".

    States without an entry are noise-free Gaussian.
    """
    states = []
    for q, name in enumerate(state_names):
        spec = config.states.get(name, SigmaSpec())
        sigma = spec.sigma
        if sigma == "estimate":
            if data is None:
                raise InsufficientDataError(f"Noise level of {name} is 'estimate' but no data was given")
            sigma = estimate_sigma(data, q, spec.df, spec.kind)
        states.append(StateNoise(kind=spec.kind, sigma=float(sigma)))
    return NoiseModel(states=tuple(states))
