"""Cumulative integrals of sampled values over the observation grid."""
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator
from scipy.integrate import cumulative_trapezoid

from .errors import QuadratureError

QuadratureRule = Literal["trapezoid", "left"]


class CumulativeIntegral(BaseModel):
    """z(t_i) = ∫_{t_0}^{t_i} f, with z(t_0) = 0."""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    times: np.ndarray
    values: np.ndarray
    rule: QuadratureRule

    @model_validator(mode="after")
    def _check(self):
        if self.values.shape != self.times.shape or self.values[0] != 0.0:
            raise QuadratureError("cumulative integral must start at zero on the sample grid")
        return self


def _validate(samples, times) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(samples, dtype=float)
    t = np.asarray(times, dtype=float)
    if y.ndim != 1 or t.ndim != 1 or y.shape[0] != t.shape[0]:
        raise QuadratureError(f"samples and times must be 1-D of equal length, got {y.shape} and {t.shape}")
    if t.shape[0] < 1:
        raise QuadratureError("need at least one sample")
    if np.any(np.diff(t) <= 0):
        raise QuadratureError("times must be strictly increasing")
    return y, t


def cumtrapz(samples, times) -> CumulativeIntegral:
    y, t = _validate(samples, times)
    values = cumulative_trapezoid(y, t, initial=0.0) if t.shape[0] > 1 else np.zeros(1)
    return CumulativeIntegral(times=t, values=values, rule="trapezoid")


def cumleft(samples, times) -> CumulativeIntegral:
    y, t = _validate(samples, times)
    values = np.concatenate([[0.0], np.cumsum(y[:-1] * np.diff(t))])
    return CumulativeIntegral(times=t, values=values, rule="left")


def cumulative_integral(samples, times, rule: QuadratureRule = "trapezoid") -> CumulativeIntegral:
    if rule == "trapezoid":
        return cumtrapz(samples, times)
    if rule == "left":
        return cumleft(samples, times)
    raise QuadratureError(f"Unknown quadrature rule '{rule}'")
