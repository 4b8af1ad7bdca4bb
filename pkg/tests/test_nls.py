"""
Tests for the nonlinear least-squares baseline and SSE surfaces.
"""
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bcls.library import builtin_model
from bcls.models import InitialCondition, ModelSpec, StateEquation, TermSpec
from bcls.nls import (
    LeastSquaresProblem,
    NlsConfig,
    ResidualFunction,
    SurfaceAxis,
    fit_nls,
    local_minima,
    relative_offset,
    sse_surface,
    weighted_sse,
)
from bcls.noise import NoiseModel
from bcls.odesim import simulate_data, solve_ode
from bcls.parser import parse_expression
from scenarios import DEFAULT_A_RANGE, DEFAULT_B_RANGE, FN_TRUTHS, LOGISTIC_TRUTH, noiseless_data, surface_truth


def test_weighted_sse():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.34"]
    data = noiseless_data(model, truth)
    exact = weighted_sse(model, truth, data, NoiseModel.gaussian(0.05, 0.05))
    assert exact < 1e-20

    shifted = data.with_observations(data.observations + 0.5)
    noise = NoiseModel.gaussian(0.5, 0.5)
    assert abs(weighted_sse(model, truth, shifted, noise) - 402.0) < 1e-9
    assert abs(weighted_sse(model, truth, shifted, noise, observed=["R"]) - 201.0) < 1e-9


def test_logistic_nls_recovers_truth():
    model = builtin_model("logistic")
    data = noiseless_data(model, LOGISTIC_TRUTH, n=21)
    fit = fit_nls(model, data, NoiseModel.lognormal(0.0), NlsConfig(start={"a": 0.7, "b": 0.002}))
    print(f"  {fit.reason} after {fit.iterations} iterations: a={fit.estimates['a']:.6f} b={fit.estimates['b']:.7f}")
    assert fit.converged
    assert fit.free == ["a", "b"]
    assert abs(fit.estimates["a"] - 0.8) < 1e-4
    assert abs(fit.estimates["b"] - 0.0015) < 1e-6


def test_fixed_values_are_held():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.34"]
    data = noiseless_data(model, truth)
    fixed = {k: v for k, v in truth.items() if k not in ("a", "b")}
    config = NlsConfig(start={"a": 0.3, "b": 0.25}, fixed=fixed, observed=["R"])
    fit = fit_nls(model, data, NoiseModel.gaussian(0.0, 0.0), config)
    assert fit.free == ["a", "b"]
    assert {k: fit.estimates[k] for k in fixed} == fixed
    if fit.converged:
        assert abs(fit.estimates["a"] - 0.34) < 1e-3
        assert abs(fit.estimates["b"] - 0.2) < 1e-3


def test_iteration_budget():
    model = builtin_model("logistic")
    data = noiseless_data(model, LOGISTIC_TRUTH, n=21)
    config = NlsConfig(start={"a": 0.5, "b": 0.003}, max_iterations=1)
    fit = fit_nls(model, data, NoiseModel.lognormal(0.0), config)
    assert not fit.converged
    assert fit.reason == "max-iterations"
    assert fit.iterations == 1


def test_config_validation():
    try:
        NlsConfig(start={"a": 1.0}, free=["a", "b"])
    except ValidationError as e:
        assert "b" in str(e)
    else:
        raise AssertionError("free value without a start accepted")


def test_surface_minimum_at_truth():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.34"]
    data = noiseless_data(model, truth)
    surface = sse_surface(
        model, data, NoiseModel.gaussian(0.0, 0.0),
        SurfaceAxis(parameter="a", lo=0.24, hi=0.44, steps=3),
        SurfaceAxis(parameter="b", lo=0.1, hi=0.3, steps=3),
        fixed={k: v for k, v in truth.items() if k not in ("a", "b")},
        observed=["R"],
    )
    assert surface.sse.shape == (3, 3)
    assert np.argmin(surface.sse) == 4
    minima = local_minima(surface)
    assert len(minima) == 1
    a, b, sse = minima[0]
    assert abs(a - 0.34) < 1e-12 and abs(b - 0.2) < 1e-12
    assert sse < 1e-8

    frame = surface.to_frame()
    assert list(frame.columns) == ["a", "b", "sse"]
    assert len(frame) == 9


def test_surface_axis_validation():
    try:
        SurfaceAxis(parameter="a", lo=1.0, hi=1.0, steps=5)
    except ValidationError:
        pass
    else:
        raise AssertionError("degenerate axis accepted")
    assert SurfaceAxis(parameter="a", lo=1.0, hi=1.0, steps=1).values.tolist() == [1.0]


def test_gauss_newton_recovers_logistic():
    model = builtin_model("logistic")
    data = noiseless_data(model, LOGISTIC_TRUTH, n=21)
    config = NlsConfig(start={"a": 0.75, "b": 0.0017}, algorithm="gauss-newton", scale_offset=1.0)
    fit = fit_nls(model, data, NoiseModel.lognormal(0.0), config)
    print(f"  {fit.reason} after {fit.iterations} iterations: a={fit.estimates['a']:.6f} b={fit.estimates['b']:.7f}")
    assert fit.converged and fit.reason == "tolerance"
    assert abs(fit.estimates["a"] - 0.8) < 1e-4
    assert abs(fit.estimates["b"] - 0.0015) < 1e-6

    budget = fit_nls(model, data, NoiseModel.lognormal(0.0), config.model_copy(update={"max_iterations": 1}))
    assert not budget.converged
    assert budget.reason == "max-iterations" and budget.iterations == 1


def _duplicated_rate_model() -> ModelSpec:
    basis = parse_expression("X", ["X"])
    return ModelSpec(
        name="duplicated",
        state_names=("X",),
        equations=(StateEquation(
            state_index=0,
            terms=(TermSpec(parameter_name="a", basis=basis), TermSpec(parameter_name="c", basis=basis)),
        ),),
        initial_conditions={"X": InitialCondition(value=1.0)},
    )


def test_gauss_newton_reports_singular_gradient():
    # a and c only enter through a + c
    model = _duplicated_rate_model()
    data = noiseless_data(model, {"a": 0.15, "c": 0.05}, n=21, t_end=5.0)
    config = NlsConfig(start={"a": 0.3, "c": 0.3}, algorithm="gauss-newton")
    fit = fit_nls(model, data, NoiseModel.gaussian(0.0), config)
    assert not fit.converged
    assert fit.reason == "singular-gradient"
    assert fit.iterations == 0


def test_missing_values_are_reported():
    model = builtin_model("fitzhugh_nagumo")
    data = noiseless_data(model, FN_TRUTHS["0.34"])
    for algorithm in ("levenberg-marquardt", "gauss-newton"):
        config = NlsConfig(start={"a": 0.3, "b": 0.25}, fixed={"C": 3.0}, algorithm=algorithm)
        fit = fit_nls(model, data, NoiseModel.gaussian(0.05, 0.05), config)
        assert not fit.converged
        assert fit.reason == "missing-values"
        assert fit.iterations == 0 and fit.sse == float("inf")
        assert fit.estimates["a"] == 0.3


def test_relative_offset():
    assert relative_offset(np.zeros(2), 0.0, 10) == 0.0
    assert relative_offset(np.array([1.0, 0.0]), 1.0, 10) == float("inf")
    assert abs(relative_offset(np.array([3.0, 4.0]), 125.0, 10) - 0.5) < 1e-15
    assert abs(relative_offset(np.array([3.0, 4.0]), 125.0, 10, scale_offset=1.0) - np.sqrt(25.0 / 108.0)) < 1e-15


def test_stationary_point_at_convergence():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.34"]
    noise = NoiseModel.gaussian(0.05, 0.05)
    trajectory = solve_ode(model, {p: truth[p] for p in model.parameter_names}, [-1.0, 1.0],
                           np.linspace(0.0, 20.0, 201))
    data = simulate_data(trajectory, noise, seed=3)
    fixed = {k: v for k, v in truth.items() if k not in ("a", "b")}
    start = {"a": truth["a"], "b": truth["b"]}

    for config in (
        NlsConfig(start=start, fixed=fixed, tolerance=1e-13),
        NlsConfig(start=start, fixed=fixed, algorithm="gauss-newton", offset_tolerance=1e-8),
    ):
        fit = fit_nls(model, data, noise, config)
        assert fit.converged, (config.algorithm, fit.reason)
        gradient = []
        for name in ("a", "b"):
            h = 1e-6 * abs(fit.estimates[name])
            up = weighted_sse(model, {**fit.estimates, name: fit.estimates[name] + h}, data, noise)
            down = weighted_sse(model, {**fit.estimates, name: fit.estimates[name] - h}, data, noise)
            gradient.append((up - down) / (2.0 * h))
        norm = float(np.linalg.norm(gradient))
        print(f"  {config.algorithm}: sse {fit.sse:.4f}, |grad| {norm:.2e}")
        assert norm < 1e-4 * (1.0 + fit.sse)


def test_forward_jacobian_matches_central_differences():
    model = builtin_model("logistic")
    noise = NoiseModel.lognormal(0.2)
    trajectory = solve_ode(model, LOGISTIC_TRUTH, [2.0], np.linspace(0.0, 20.0, 21))
    data = simulate_data(trajectory, noise, seed=8)
    problem = LeastSquaresProblem(ResidualFunction(model, data, noise), ["a", "b"], {})

    rng = np.random.default_rng(12)
    for theta in np.column_stack([rng.uniform(0.5, 1.0, 10), rng.uniform(0.001, 0.002, 10)]):
        r = problem.residuals(theta[:, None])[:, 0]
        forward = problem.jacobian(theta, r, 1e-6)
        h = 1e-5 * theta
        central = (problem.residuals(theta[:, None] + np.diag(h)) - problem.residuals(theta[:, None] - np.diag(h))) / (2.0 * h)
        for j in range(2):
            relative = np.linalg.norm(forward[:, j] - central[:, j]) / np.linalg.norm(central[:, j])
            assert relative < 1e-3, (theta, j, relative)


def _fn_surface_cell(preset: str, a_index: int, b_index: int):
    """The 3 x 3 block of the default (a, b) grid centred on one cell, SSE on R only."""
    model = builtin_model("fitzhugh_nagumo")
    truth = surface_truth(preset)
    data = noiseless_data(model, truth)
    a_lo, a_hi, a_steps = DEFAULT_A_RANGE
    b_lo, b_hi, b_steps = DEFAULT_B_RANGE
    a_step = (a_hi - a_lo) / (a_steps - 1)
    b_step = (b_hi - b_lo) / (b_steps - 1)
    return sse_surface(
        model, data, NoiseModel.gaussian(0.0, 0.0),
        SurfaceAxis(parameter="a", lo=a_lo + (a_index - 1) * a_step, hi=a_lo + (a_index + 1) * a_step, steps=3),
        SurfaceAxis(parameter="b", lo=b_lo + (b_index - 1) * b_step, hi=b_lo + (b_index + 1) * b_step, steps=3),
        fixed={k: v for k, v in truth.items() if k not in ("a", "b")},
        observed=["R"],
    )


def test_surface_local_minima_away_from_truth():
    for preset, cell, target in (("fn", (37, 46), (1.735, 2.816)), ("fn-hopf", (22, 33), (1.153, 2.020))):
        minima = local_minima(_fn_surface_cell(preset, *cell))
        assert len(minima) == 1, preset
        a, b, sse = minima[0]
        print(f"  {preset}: local minimum at a={a:.3f} b={b:.3f} (sse {sse:.3f})")
        assert abs(a - target[0]) < 1e-3 and abs(b - target[1]) < 1e-3
        assert sse > 0.0


def test_nls_from_wrong_start_finds_the_local_minimum():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.58"]
    data = noiseless_data(model, truth)
    fixed = {k: v for k, v in truth.items() if k not in ("a", "b")}
    config = NlsConfig(start={"a": 1.2, "b": 2.1}, fixed=fixed, observed=["R"])
    fit = fit_nls(model, data, NoiseModel.gaussian(0.0, 0.0), config)
    print(f"  {fit.reason}: a={fit.estimates['a']:.4f} b={fit.estimates['b']:.4f}")
    assert fit.converged
    assert abs(fit.estimates["a"] - 1.153) < 0.06
    assert abs(fit.estimates["b"] - 2.020) < 0.09


def main():
    print("\nNLS Tests")
    print("=" * 60)
    tests = [
        test_weighted_sse,
        test_logistic_nls_recovers_truth,
        test_fixed_values_are_held,
        test_iteration_budget,
        test_config_validation,
        test_surface_minimum_at_truth,
        test_surface_axis_validation,
        test_gauss_newton_recovers_logistic,
        test_gauss_newton_reports_singular_gradient,
        test_missing_values_are_reported,
        test_relative_offset,
        test_stationary_point_at_convergence,
        test_forward_jacobian_matches_central_differences,
        test_surface_local_minima_away_from_truth,
        test_nls_from_wrong_start_finds_the_local_minimum,
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
