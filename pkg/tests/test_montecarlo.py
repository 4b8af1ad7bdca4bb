"""
Tests for the replicate runner, Monte Carlo summaries, bootstrap intervals and
the consistency sweep. Replicate counts are kept small; the full simulation
studies live in validate_simulation_tables.py.
"""
import sys
from pathlib import Path

import numpy as np
from pydantic import ValidationError

# Add project root to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from bcls.errors import ConfigError
from bcls.estimator import fit_bcls
from bcls.library import builtin_model
from bcls.montecarlo import (
    McConfig,
    MethodSpec,
    TimeGrid,
    bootstrap_coverage,
    consistency_sweep,
    intervals_frame,
    nonparametric_bootstrap,
    parametric_bootstrap,
    percentile_interval,
    run_monte_carlo,
    run_replicates,
)
from bcls.noise import NoiseModel
from bcls.odesim import simulate_data, solve_ode
from scenarios import FN_TRUTHS, LOGISTIC_TRUTH, scenario_config, table2_config, table3_config, table4_config


def square_or_fail(r: int) -> int:
    if r == 3:
        raise ValueError("replicate 3 fails")
    return r * r


def test_run_replicates_is_order_independent():
    sequential = run_replicates(square_or_fail, 250, threads=1)
    threaded = run_replicates(square_or_fail, 250, threads=4)
    assert sorted(sequential) == sorted(threaded) == list(range(250))
    assert isinstance(sequential[3], ValueError) and isinstance(threaded[3], ValueError)
    assert all(sequential[r] == threaded[r] for r in range(250) if r != 3)


def test_percentile_interval():
    samples = np.arange(1.0, 101.0)
    assert percentile_interval(samples, 0.9) == (5.0, 96.0)
    assert percentile_interval([3.0, 1.0], 0.95) == (1.0, 3.0)
    narrow = percentile_interval(samples, 0.8)
    wide = percentile_interval(samples, 0.95)
    assert wide[0] <= narrow[0] and narrow[1] <= wide[1]


def test_logistic_monte_carlo_summary():
    config = table2_config(sigmas=[0.2], replicates=40, seed=1, include_nls=False)
    summary = run_monte_carlo(config)
    frame = summary.to_frame()
    print(frame.to_string(index=False))
    assert list(frame.columns) == ["scenario", "method", "param", "mean", "mc_sd", "bias", "conv_rate"]
    assert len(frame) == 4
    assert frame["conv_rate"].isna().all()
    assert set(frame["scenario"]) == {"table2 sigma=0.2 n=21"}

    a = summary.row("BCLS", "a")
    assert abs(a.mean - 0.8) < 0.03
    assert a.used == 40 and a.failed == 0
    assert abs(a.bias - (a.mean - 0.8)) < 1e-15


def test_threads_do_not_change_results():
    one = run_monte_carlo(table2_config(sigmas=[0.4], replicates=20, seed=5, include_nls=False, threads=1))
    four = run_monte_carlo(table2_config(sigmas=[0.4], replicates=20, seed=5, include_nls=False, threads=4))
    assert one.to_frame().equals(four.to_frame())


def test_uncorrected_ls_underestimates_b_at_high_noise():
    summary = run_monte_carlo(table2_config(sigmas=[0.8], replicates=100, seed=2, include_nls=False))
    bcls_b = summary.row("BCLS", "b").mean
    ls_b = summary.row("LS no bias adj", "b").mean
    print(f"  b: BCLS {bcls_b:.6f}, LS {ls_b:.6f} (truth 0.0015)")
    assert ls_b < bcls_b
    assert abs(bcls_b - 0.0015) < abs(ls_b - 0.0015)


def test_nls_rows_report_convergence():
    config = table4_config(n=101, replicates=2, seed=0, starts=[(0.4, 0.4)])
    summary = run_monte_carlo(config)
    rows = [r for r in summary.rows if r.method == "NLS(a=0.4,b=0.4)"]
    assert sorted(r.parameter for r in rows) == ["a", "b"]
    for r in rows:
        assert 0.0 <= r.conv_rate <= 1.0
        assert r.used + r.failed == 2


def test_config_validation():
    try:
        McConfig(
            model=builtin_model("fitzhugh_nagumo"),
            truth={"C": 3.0, "a": 0.34},
            noise=NoiseModel.gaussian(0.0, 0.0),
            noise_levels=[[0.05]],
            grids=[TimeGrid(points=201)],
            replicates=10,
            methods=[MethodSpec(kind="nls_start", start={"a": 0.4}, free=["a", "b"])],
        )
    except ValidationError as e:
        message = str(e)
        assert "truth is missing" in message
        assert "start does not cover" in message
        assert "needs 2 sigmas" in message
    else:
        raise AssertionError("invalid Monte Carlo config accepted")


def logistic_sample(sigma: float = 0.2, n: int = 21, seed: int = 9):
    model = builtin_model("logistic")
    times = TimeGrid(points=n).times
    trajectory = solve_ode(model, LOGISTIC_TRUTH, [2.0], times)
    noise = NoiseModel.lognormal(sigma)
    return model, noise, times, simulate_data(trajectory, noise, seed)


def test_parametric_bootstrap():
    model, noise, times, data = logistic_sample()
    fit = fit_bcls(model, data, noise)
    intervals = parametric_bootstrap(model, fit, noise, times, B=60, seed=100)
    again = parametric_bootstrap(model, fit, noise, times, B=60, seed=100, threads=3)
    assert [ci.parameter for ci in intervals] == ["a", "b"]
    assert intervals == again
    for ci in intervals:
        assert ci.kind == "parametric" and ci.B == 60
        assert ci.lower < fit.estimates[ci.parameter] < ci.upper

    frame = intervals_frame(intervals)
    assert list(frame.columns) == ["param", "lower", "upper", "kind", "level"]


def test_nonparametric_bootstrap():
    model, noise, _, data = logistic_sample()
    fit = fit_bcls(model, data, noise)
    intervals = nonparametric_bootstrap(data, model, noise, B=60, seed=200, level=0.9)
    for ci in intervals:
        assert ci.kind == "nonparametric" and ci.level == 0.9
        assert ci.lower < fit.estimates[ci.parameter] < ci.upper


def test_bootstrap_coverage_runs():
    model, noise, times, _ = logistic_sample()
    rows = bootstrap_coverage(model, LOGISTIC_TRUTH, noise, times, outer=6, B=30, seed=0)
    assert [r.parameter for r in rows] == ["a", "b"]
    for r in rows:
        assert r.outer == 6
        assert 0.0 <= r.coverage <= 1.0


def test_consistency_sweep():
    model = builtin_model("logistic")
    rows = consistency_sweep(model, LOGISTIC_TRUTH, NoiseModel.lognormal(0.4), [21, 201], replicates=40, seed=3)
    assert [(r.n, r.parameter) for r in rows] == [(21, "a"), (21, "b"), (201, "a"), (201, "b")]
    sd = {(r.n, r.parameter): r.mc_sd for r in rows}
    assert sd[(201, "a")] < sd[(21, "a")]
    assert sd[(201, "b")] < sd[(21, "b")]

    try:
        consistency_sweep(model, LOGISTIC_TRUTH, NoiseModel.lognormal(0.4), [201, 21], replicates=5, seed=3)
    except ConfigError:
        pass
    else:
        raise AssertionError("decreasing grid sizes accepted")


def test_noise_model_must_cover_every_state():
    try:
        McConfig(
            model=builtin_model("fitzhugh_nagumo"),
            truth=dict(FN_TRUTHS["0.34"]),
            noise=NoiseModel.gaussian(0.05),
            noise_levels=[[0.05, 0.05]],
            grids=[TimeGrid(points=201)],
            replicates=10,
            methods=[MethodSpec(kind="bcls")],
        )
    except ValidationError as e:
        assert "noise model has 1 states, model has 2" in str(e)
    else:
        raise AssertionError("one-state noise model accepted for two states")


def test_table3_presets():
    grid = scenario_config("table3", sigma_grid=True, replicates=2)
    assert len(grid.noise_levels) == 9
    assert [0.05, 0.15] in grid.noise_levels and [0.15, 0.05] in grid.noise_levels
    assert [m.name for m in grid.methods] == ["BCLS", "LS"]
    assert grid.nls_overrides["algorithm"] == "gauss-newton"

    pair = scenario_config("table3", sigmas=[0.1, 0.05], include_nls=True)
    assert pair.noise_levels == [[0.1, 0.05]]
    assert [m.name for m in pair.methods] == ["BCLS", "LS", "NLS(truth)"]
    assert scenario_config("table3", sigmas=[0.15]).noise_levels == [[0.15, 0.15]]
    try:
        scenario_config("table3", sigmas=[0.05, 0.1, 0.15])
    except ConfigError:
        pass
    else:
        raise AssertionError("three sigmas accepted for two states")

    summary = run_monte_carlo(table3_config(n=51, replicates=2, seed=4, include_nls=True))
    rows = [r for r in summary.rows if r.method == "NLS(truth)"]
    assert sorted(r.parameter for r in rows) == ["C", "a", "b", "r0", "v0"]
    for r in rows:
        assert 0.0 <= r.conv_rate <= 1.0
        assert r.used + r.failed == 2


def test_bootstrap_intervals_collapse_without_noise():
    model = builtin_model("logistic")
    times = TimeGrid(points=21).times
    noise = NoiseModel.lognormal(0.0)
    data = simulate_data(solve_ode(model, LOGISTIC_TRUTH, [2.0], times), noise, seed=0)
    fit = fit_bcls(model, data, noise)
    for ci in parametric_bootstrap(model, fit, noise, times, B=20, seed=7):
        assert ci.lower == ci.upper, ci


def test_fitzhugh_nagumo_nonparametric_bootstrap():
    model = builtin_model("fitzhugh_nagumo")
    truth = FN_TRUTHS["0.34"]
    noise = NoiseModel.gaussian(0.05, 0.05)
    trajectory = solve_ode(model, {p: truth[p] for p in model.parameter_names}, [-1.0, 1.0], TimeGrid(points=201).times)
    data = simulate_data(trajectory, noise, seed=21)
    fit = fit_bcls(model, data, noise)
    intervals = nonparametric_bootstrap(data, model, noise, B=40, seed=300, threads=2)
    assert [ci.parameter for ci in intervals] == model.targets
    for ci in intervals:
        print(f"  {ci.parameter}: [{ci.lower:.4f}, {ci.upper:.4f}] around {fit.estimates[ci.parameter]:.4f}")
        assert ci.B == 40 and ci.lower < ci.upper
        assert ci.lower <= fit.estimates[ci.parameter] <= ci.upper


def main():
    print("\nMonte Carlo and Bootstrap Tests")
    print("=" * 60)
    tests = [
        test_run_replicates_is_order_independent,
        test_percentile_interval,
        test_logistic_monte_carlo_summary,
        test_threads_do_not_change_results,
        test_uncorrected_ls_underestimates_b_at_high_noise,
        test_nls_rows_report_convergence,
        test_config_validation,
        test_parametric_bootstrap,
        test_nonparametric_bootstrap,
        test_bootstrap_coverage_runs,
        test_consistency_sweep,
        test_noise_model_must_cover_every_state,
        test_table3_presets,
        test_bootstrap_intervals_collapse_without_noise,
        test_fitzhugh_nagumo_nonparametric_bootstrap,
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
