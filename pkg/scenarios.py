"""
Preset simulation studies: the logistic growth and FitzHugh-Nagumo settings used
to compare BCLS, uncorrected LS and NLS, plus SSE-surface presets.
"""
from typing import Optional, Sequence

from bcls.errors import ConfigError
from bcls.library import builtin_model
from bcls.models import ModelSpec, TimeSeriesData
from bcls.montecarlo import McConfig, MethodSpec, TimeGrid
from bcls.noise import NoiseModel
from bcls.odesim import initial_state, simulate_data, solve_ode

SCENARIOS = ("table2", "table3", "table4", "consistency")

LOGISTIC_TRUTH = {"a": 0.8, "b": 0.0015}
LOGISTIC_SIGMAS = (0.2, 0.4, 0.6, 0.8)

FN_TRUTHS = {
    "0.34": {"C": 3.0, "a": 0.34, "b": 0.2, "v0": -1.0, "r0": 1.0},
    "0.58": {"C": 3.0, "a": 0.58, "b": 0.58, "v0": -1.0, "r0": 1.0},
}
FN_START_A = (0.4, 0.8, 1.2)
FN_START_B = (0.4, 0.8)
TABLE3_SIGMA_LEVELS = (0.05, 0.1, 0.15)
TABLE3_SIGMAS = tuple((s1, s2) for s1 in TABLE3_SIGMA_LEVELS for s2 in TABLE3_SIGMA_LEVELS)

# NLS in the preset studies: step-halving Gauss-Newton with R nls() defaults
NLS_BASELINE = {"algorithm": "gauss-newton", "max_iterations": 50, "offset_tolerance": 1e-5,
                "min_factor": 1.0 / 1024.0}

SURFACE_PRESETS = {"fn": "0.34", "fn-hopf": "0.58"}
DEFAULT_A_RANGE = (0.3, 2.2, 50)
DEFAULT_B_RANGE = (0.0, 3.0, 50)


def table2_config(
    sigmas: Sequence[float] = LOGISTIC_SIGMAS,
    n_values: Sequence[int] = (21,),
    replicates: int = 1000,
    seed: int = 0,
    threads: int = 1,
    include_nls: bool = True,
) -> McConfig:
    """Logistic growth, lognormal noise, BCLS vs LS (vs NLS started from BCLS)."""
    model = builtin_model("logistic")
    methods = [MethodSpec(kind="bcls"), MethodSpec(kind="ls", label="LS no bias adj")]
    if include_nls:
        methods.append(MethodSpec(kind="nls_bcls", label="NLS"))
    return McConfig(
        name="table2",
        model=model,
        truth=dict(LOGISTIC_TRUTH),
        noise=NoiseModel.lognormal(0.0),
        noise_levels=[[s] for s in sigmas],
        grids=[TimeGrid(start=0.0, end=20.0, points=n) for n in n_values],
        replicates=replicates,
        methods=methods,
        base_seed=seed,
        nls_overrides=dict(NLS_BASELINE),
        threads=threads,
    )


def _fn_truth(variant: str) -> dict[str, float]:
    if variant not in FN_TRUTHS:
        raise ConfigError([f"unknown variant '{variant}' (choose from {', '.join(FN_TRUTHS)})"])
    return dict(FN_TRUTHS[variant])


def table3_config(
    variant: str = "0.34",
    sigmas: Sequence[tuple[float, float]] = ((0.05, 0.05),),
    n: int = 201,
    replicates: int = 1000,
    seed: int = 0,
    threads: int = 1,
    include_nls: bool = False,
) -> McConfig:
    """FitzHugh-Nagumo, Gaussian noise on both states, all five values estimated."""
    methods = [MethodSpec(kind="bcls"), MethodSpec(kind="ls")]
    if include_nls:
        methods.append(MethodSpec(kind="nls_truth"))
    return McConfig(
        name=f"table3 a={variant}",
        model=builtin_model("fitzhugh_nagumo"),
        truth=_fn_truth(variant),
        noise=NoiseModel.gaussian(0.0, 0.0),
        noise_levels=[list(s) for s in sigmas],
        grids=[TimeGrid(start=0.0, end=20.0, points=n)],
        replicates=replicates,
        methods=methods,
        base_seed=seed,
        nls_overrides=dict(NLS_BASELINE),
        threads=threads,
    )


def table4_config(
    variant: str = "0.34",
    sigma: float = 0.05,
    n: int = 201,
    replicates: int = 500,
    seed: int = 0,
    threads: int = 1,
    starts: Optional[Sequence[tuple[float, float]]] = None,
) -> McConfig:
    """
    NLS of (a, b) from the R observations only, other values fixed at truth,
    from a grid of wrong starts and from the BCLS estimates.
    """
    grid = starts if starts is not None else [(a, b) for b in FN_START_B for a in FN_START_A]
    methods = [
        MethodSpec(kind="nls_start", start={"a": a, "b": b}, free=["a", "b"]) for a, b in grid
    ]
    methods.append(MethodSpec(kind="nls_bcls", label="NLS(from BCLS)", free=["a", "b"]))
    return McConfig(
        name=f"table4 a={variant}",
        model=builtin_model("fitzhugh_nagumo"),
        truth=_fn_truth(variant),
        noise=NoiseModel.gaussian(0.0, 0.0),
        noise_levels=[[sigma, sigma]],
        grids=[TimeGrid(start=0.0, end=20.0, points=n)],
        replicates=replicates,
        methods=methods,
        base_seed=seed,
        nls_overrides=dict(NLS_BASELINE),
        observed=["R"],
        threads=threads,
    )


def consistency_settings(sigma: float = 0.4) -> dict:
    """Arguments for consistency_sweep on the logistic model."""
    return {
        "model": builtin_model("logistic"),
        "truth": dict(LOGISTIC_TRUTH),
        "noise": NoiseModel.lognormal(sigma),
        "n_values": (21, 201, 2001),
    }


def scenario_config(
    name: str,
    sigmas: Optional[Sequence[float]] = None,
    n: Optional[int] = None,
    replicates: Optional[int] = None,
    seed: int = 0,
    threads: int = 1,
    variant: str = "0.34",
    include_nls: Optional[bool] = None,
    sigma_grid: bool = False,
) -> McConfig:
    """
    Build a preset Monte Carlo config, optionally narrowed to given sigmas and one n.

    table2 takes each sigma as a noise level. table3 reads one sigma as (σ, σ) and
    two as (σ_V, σ_R); `sigma_grid` runs every pair from TABLE3_SIGMA_LEVELS instead.
    table4 uses the first sigma. `include_nls` None keeps the preset's own choice
    (NLS from BCLS in table2, no NLS from the truth in table3).
    """
    if name == "table2":
        return table2_config(
            sigmas=list(sigmas) if sigmas else LOGISTIC_SIGMAS,
            n_values=[n] if n is not None else (21,),
            replicates=replicates or 1000,
            seed=seed,
            threads=threads,
            include_nls=True if include_nls is None else include_nls,
        )
    if name == "table3":
        if sigma_grid:
            pairs = TABLE3_SIGMAS
        elif not sigmas:
            pairs = ((0.05, 0.05),)
        elif len(sigmas) == 1:
            pairs = ((sigmas[0], sigmas[0]),)
        elif len(sigmas) == 2:
            pairs = ((sigmas[0], sigmas[1]),)
        else:
            raise ConfigError([f"table3 takes one or two sigmas, got {len(sigmas)}"])
        return table3_config(variant=variant, sigmas=pairs, n=n or 201, replicates=replicates or 1000,
                             seed=seed, threads=threads, include_nls=bool(include_nls))
    if name == "table4":
        return table4_config(variant=variant, sigma=sigmas[0] if sigmas else 0.05, n=n or 201,
                             replicates=replicates or 500, seed=seed, threads=threads)
    raise ConfigError([f"unknown scenario '{name}' (choose from {', '.join(SCENARIOS)})"])


def surface_truth(preset: str) -> dict[str, float]:
    if preset not in SURFACE_PRESETS:
        raise ConfigError([f"unknown surface preset '{preset}' (choose from {', '.join(SURFACE_PRESETS)})"])
    return _fn_truth(SURFACE_PRESETS[preset])


def noiseless_data(model: ModelSpec, truth: dict[str, float], n: int = 201, t_end: float = 20.0,
                   substeps: int = 10) -> TimeSeriesData:
    """Observations equal to the exact (RK4) trajectory at the truth."""
    params = {p: truth[p] for p in model.parameter_names}
    grid = TimeGrid(start=0.0, end=t_end, points=n)
    trajectory = solve_ode(model, params, initial_state(model, truth), grid.times, substeps)
    return simulate_data(trajectory, NoiseModel.gaussian(*([0.0] * model.s)), seed=0)
