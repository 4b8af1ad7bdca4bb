"""
Tests for cumulative quadrature on the observation grid.
"""
import sys
from pathlib import Path

import numpy as np

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bcls.errors import QuadratureError
from bcls.quadrature import CumulativeIntegral, cumleft, cumtrapz, cumulative_integral


def test_small_grid_values():
    t = np.array([0.0, 0.5, 1.0])
    assert np.allclose(cumtrapz(t, t).values, [0.0, 0.125, 0.5])
    assert np.allclose(cumleft(t, t).values, [0.0, 0.0, 0.25])
    assert cumulative_integral(t, t, "left").rule == "left"


def test_single_sample_integrates_to_zero():
    assert cumtrapz([3.0], [1.0]).values.tolist() == [0.0]
    assert cumleft([3.0], [1.0]).values.tolist() == [0.0]


def _final_error(rule, n: int) -> float:
    t = np.linspace(0.0, 1.0, n)
    return abs(cumulative_integral(np.exp(t), t, rule).values[-1] - (np.e - 1.0))


def test_convergence_orders():
    """Halving the step divides the error by ~4 (trapezoid) and ~2 (left)."""
    trapezoid_ratio = _final_error("trapezoid", 21) / _final_error("trapezoid", 41)
    left_ratio = _final_error("left", 21) / _final_error("left", 41)
    print(f"  trapezoid ratio {trapezoid_ratio:.3f}, left ratio {left_ratio:.3f}")
    assert 3.5 < trapezoid_ratio < 4.5
    assert 1.8 < left_ratio < 2.2


def test_invalid_grids_are_rejected():
    for samples, times in [
        ([1.0, 2.0], [0.0, 0.0]),
        ([1.0, 2.0, 3.0], [0.0, 2.0, 1.0]),
        ([1.0, 2.0], [0.0, 1.0, 2.0]),
        ([], []),
    ]:
        try:
            cumtrapz(samples, times)
        except QuadratureError:
            continue
        raise AssertionError(f"accepted samples={samples} times={times}")

    try:
        cumulative_integral([1.0, 2.0], [0.0, 1.0], "simpson")
    except QuadratureError as e:
        assert "simpson" in str(e)
    else:
        raise AssertionError("unknown rule accepted")


def test_integral_must_start_at_zero():
    try:
        CumulativeIntegral(times=np.array([0.0, 1.0]), values=np.array([1.0, 2.0]), rule="left")
    except QuadratureError:
        return
    raise AssertionError("non-zero start accepted")


def _logistic_integral(t, a=0.8, b=0.0015, x0=2.0):
    """Exact ∫_0^t X for logistic growth from x0."""
    return np.log1p(x0 * b * np.expm1(a * t) / a) / b


def test_logistic_rule_sensitivity():
    def error(rule, n):
        t = np.linspace(0.0, 20.0, n)
        k = 0.8 / 0.0015
        x = k * 2.0 * np.exp(0.8 * t) / (k + 2.0 * np.expm1(0.8 * t))
        return np.max(np.abs(cumulative_integral(x, t, rule).values - _logistic_integral(t)))

    for n in (21, 201):
        assert error("trapezoid", n) < error("left", n) / 5.0
    trapezoid_ratio = error("trapezoid", 201) / error("trapezoid", 401)
    left_ratio = error("left", 201) / error("left", 401)
    print(f"  trapezoid ratio {trapezoid_ratio:.3f}, left ratio {left_ratio:.3f}")
    assert 4.0 / 1.5 < trapezoid_ratio < 4.0 * 1.5
    assert 2.0 / 1.5 < left_ratio < 2.0 * 1.5


def test_integrals_are_additive():
    rng = np.random.default_rng(4)
    t = np.cumsum(rng.uniform(0.05, 0.5, 60))
    samples = np.sin(t) + rng.standard_normal(60)
    for rule in ("trapezoid", "left"):
        full = cumulative_integral(samples, t, rule).values
        for k in (0, 1, 17, 58, 59):
            tail = cumulative_integral(samples[k:], t[k:], rule).values[-1]
            assert abs(full[k] + tail - full[-1]) < 1e-12 * (1.0 + np.max(np.abs(full))), (rule, k)


def main():
    print("\nQuadrature Tests")
    print("=" * 60)
    tests = [
        test_small_grid_values,
        test_single_sample_integrates_to_zero,
        test_convergence_orders,
        test_invalid_grids_are_rejected,
        test_integral_must_start_at_zero,
        test_logistic_rule_sensitivity,
        test_integrals_are_additive,
    ]
    failed = 0
    for test in tests:
        try:
            test()
            print(f"  ✅ {test.__name__}")
        except Exception as e:
            failed += 1
            print(f"  ❌ {test.__name__}: {e}")
    print("=" * 60)
    return failed == 0


if __name__ == "__main__":
    sys.exit(0 if main() else 1)
