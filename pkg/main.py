import argparse
import logging
import os
import sys
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv

load_dotenv()

# Configure structlog BEFORE any bcls imports
import structlog  # noqa: E402

LOG_FILE = os.getenv("LOG_FILE", "./bcls.log")
_log_file = open(LOG_FILE, "a")  # noqa: SIM115

structlog.configure(
    processors=[
        structlog.processors.TimeStamper(fmt="iso"),
        structlog.processors.JSONRenderer(),
    ],
    wrapper_class=structlog.make_filtering_bound_logger(logging.INFO),
    logger_factory=structlog.PrintLoggerFactory(file=_log_file),
    cache_logger_on_first_use=True,
)

from pydantic import BaseModel, ConfigDict  # noqa: E402

from bcls.errors import BclsError, ConfigError  # noqa: E402
from bcls.library import BUILTIN_MODELS, MODEL_ALIASES  # noqa: E402

# Config from ENV
THREADS = int(os.getenv("BCLS_THREADS", "4"))
SEED = int(os.getenv("BCLS_SEED", "20100101"))
SUBSTEPS = int(os.getenv("BCLS_SUBSTEPS", "10"))
OUTPUT_DIR = os.getenv("BCLS_OUTPUT_DIR", ".")

DEFAULT_SIMULATION_SIGMA = {"logistic": 0.2, "fitzhugh_nagumo": 0.05}


def setup_logging():
    """Route stdlib logs to file, keep stdout clean."""
    logging.basicConfig(
        level=logging.WARNING,
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
        handlers=[logging.FileHandler(LOG_FILE, mode="a")],
        force=True,
    )


def log(msg: str):
    """Print to stdout intentionally."""
    print(msg, file=sys.stdout)


def fmt(value: float) -> str:
    return f"{value:.6g}"


def output_path(name: str) -> Path:
    """Bare file names land in BCLS_OUTPUT_DIR; anything with a directory is kept."""
    path = Path(name)
    if path.parent == Path("."):
        return Path(OUTPUT_DIR) / path
    return path


def parse_range(text: str) -> tuple[float, float, int]:
    """'lo:hi:steps' → (lo, hi, steps)."""
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"expected lo:hi:steps, got '{text}'")
    return float(parts[0]), float(parts[1]), int(parts[2])


def parse_assignments(items: list[str]) -> dict[str, float]:
    values = {}
    for item in items:
        name, sep, value = item.partition("=")
        if not sep or not name:
            raise ValueError(f"expected name=value, got '{item}'")
        values[name.strip()] = float(value)
    return values


def parse_sigmas(text: Optional[str]) -> Optional[list[float]]:
    if text is None:
        return None
    return [float(s) for s in text.split(",")]


def is_builtin(name: str) -> bool:
    return name in BUILTIN_MODELS or name in MODEL_ALIASES


class RunConfig(BaseModel):
    """Everything a command needs, checked in one pass before any work starts."""
    model_config = ConfigDict(frozen=True)

    command: Literal["estimate", "simulate", "mc", "bootstrap", "surface", "sigma"]
    model: str = "logistic"
    data: Optional[str] = None
    output: Optional[str] = None
    seed: int = SEED
    threads: int = THREADS
    substeps: int = SUBSTEPS
    rule: Literal["trapezoid", "left"] = "trapezoid"
    corrected: bool = True
    nls: bool = False
    sigma: Optional[str] = None
    params: list[str] = []
    n: Optional[int] = None
    t_end: float = 20.0
    scenario: Optional[str] = None
    variant: str = "0.34"
    reps: Optional[int] = None
    sigma_grid: bool = False
    kind: Literal["parametric", "nonparametric"] = "parametric"
    B: int = 1000
    level: float = 0.95
    a_range: str = "0.3:2.2:50"
    b_range: str = "0:3:50"
    observe: Optional[str] = None
    state: Optional[str] = None
    df: int = 3
    noise_kind: Optional[Literal["gaussian", "lognormal"]] = None

    def violations(self) -> list[str]:
        problems = []
        needs_data = self.command in ("estimate", "bootstrap", "sigma")
        if needs_data:
            if not self.data:
                problems.append(f"{self.command}: --data is required")
            elif not Path(self.data).is_file():
                problems.append(f"data file not found: {self.data}")
        if self.command != "surface" and self.command != "mc" and not is_builtin(self.model):
            if not Path(self.model).is_file():
                problems.append(f"model is neither a built-in ({', '.join(BUILTIN_MODELS)}) nor a file: {self.model}")
        if self.command == "mc":
            from scenarios import SCENARIOS

            if self.scenario not in SCENARIOS:
                problems.append(f"mc: --scenario must be one of {', '.join(SCENARIOS)}")
        if self.command == "surface":
            from scenarios import SURFACE_PRESETS

            if self.model not in SURFACE_PRESETS:
                problems.append(f"surface: --model must be one of {', '.join(SURFACE_PRESETS)}")
            for flag, text in (("--a-range", self.a_range), ("--b-range", self.b_range)):
                try:
                    lo, hi, steps = parse_range(text)
                    if steps < 1 or (steps > 1 and hi <= lo):
                        problems.append(f"{flag}: need steps ≥ 1 and hi > lo, got '{text}'")
                except ValueError as e:
                    problems.append(f"{flag}: {e}")
        try:
            sigmas = parse_sigmas(self.sigma)
            if sigmas is not None and any(s < 0 for s in sigmas):
                problems.append("--sigma values must be non-negative")
        except ValueError:
            problems.append(f"--sigma: expected comma-separated numbers, got '{self.sigma}'")
        try:
            parse_assignments(self.params)
        except ValueError as e:
            problems.append(f"--param: {e}")
        if self.threads < 1:
            problems.append("--threads must be at least 1")
        if self.substeps < 1:
            problems.append("substeps must be at least 1")
        if self.n is not None and self.n < 2:
            problems.append("--n must be at least 2")
        if self.reps is not None and self.reps < 1:
            problems.append("--reps must be at least 1")
        if self.B < 1:
            problems.append("--B must be at least 1")
        if not 0.0 < self.level < 1.0:
            problems.append("--level must lie strictly between 0 and 1")
        if self.df < 1:
            problems.append("--df must be at least 1")
        return problems


def load_definition(config: RunConfig):
    from bcls.loader import load_model

    return load_model(config.model)


def noise_for(definition, sigmas: Optional[list[float]], data=None):
    """Model noise kinds; sigmas from the command line when given, else from the model (estimated from data)."""
    from bcls.noise import NoiseConfig, SigmaSpec, resolve_noise

    model = definition.model
    if sigmas is None:
        return resolve_noise(definition.noise, model.state_names, data)
    if len(sigmas) != model.s:
        raise ConfigError([f"--sigma needs {model.s} values for states {', '.join(model.state_names)}"])
    states = {
        name: definition.noise.states.get(name, SigmaSpec()).model_copy(update={"sigma": sigma})
        for name, sigma in zip(model.state_names, sigmas)
    }
    return resolve_noise(NoiseConfig(states=states), model.state_names)


def default_truth(model_name: str) -> dict[str, float]:
    from scenarios import FN_TRUTHS, LOGISTIC_TRUTH

    key = MODEL_ALIASES.get(model_name, model_name)
    if key == "logistic":
        return dict(LOGISTIC_TRUTH)
    if key == "fitzhugh_nagumo":
        return dict(FN_TRUTHS["0.34"])
    return {}


def cmd_estimate(config: RunConfig):
    """BCLS on a data file, optionally followed by NLS started from the BCLS estimates."""
    import pandas as pd

    from bcls.estimator import BclsOptions, describe_stage, fit_bcls
    from bcls.library import resolve_stage_plan
    from bcls.loader import read_series_csv
    from bcls.nls import NlsConfig, fit_nls

    definition = load_definition(config)
    model = definition.model
    data = read_series_csv(config.data, list(model.state_names))
    noise = noise_for(definition, parse_sigmas(config.sigma), data)
    plan = resolve_stage_plan(model)
    options = BclsOptions(rule=config.rule, corrected=config.corrected)
    fit = fit_bcls(model, data, noise, plan, options)

    method = "BCLS" if config.corrected else "LS (no bias correction)"
    log(f"Model: {model.name}  ({data.n} observations, rule={config.rule})")
    log("Noise: " + ", ".join(f"{name} {noise.kind(q)} sigma={fmt(noise.sigma(q))}"
                              for q, name in enumerate(model.state_names)))
    for stage, result in zip(plan.stages, fit.stages):
        log(f"  {describe_stage(stage, model)}  [residual SD {fmt(result.residual_sd)}]")
    log(f"\n{method} estimates:")
    for name in model.targets:
        log(f"  {name:>6} = {fmt(fit.estimates[name])}")

    rows = [{"param": name, "estimate": fit.estimates[name]} for name in model.targets]
    if config.nls:
        nls = fit_nls(model, data, noise, NlsConfig(start=dict(fit.estimates), substeps=config.substeps))
        status = "converged" if nls.converged else f"did not converge ({nls.reason})"
        log(f"\nNLS from {method}: {status} after {nls.iterations} iterations, SSE={fmt(nls.sse)}")
        for name in model.targets:
            log(f"  {name:>6} = {fmt(nls.estimates[name])}")
        for row in rows:
            row["nls"] = nls.estimates[row["param"]]
    if config.output:
        path = output_path(config.output)
        pd.DataFrame(rows).to_csv(path, index=False)
        stages = pd.DataFrame([{"stage": r.label, "residual_sd": r.residual_sd} for r in fit.stages])
        stages.to_csv(path.with_name(path.stem + "_stages.csv"), index=False)
        log(f"\nWrote {path}")


def cmd_simulate(config: RunConfig):
    from bcls.loader import write_series_csv
    from bcls.montecarlo import TimeGrid
    from bcls.odesim import initial_state, simulate_data, solve_ode

    definition = load_definition(config)
    model = definition.model
    truth = default_truth(config.model)
    truth.update(parse_assignments(config.params))
    missing = [t for t in model.targets if t not in truth]
    if missing:
        raise ConfigError([f"--param needed for: {', '.join(missing)}"])
    sigmas = parse_sigmas(config.sigma)
    if sigmas is None and is_builtin(config.model):
        sigmas = [DEFAULT_SIMULATION_SIGMA[model.name]] * model.s
    if definition.noise.needs_data and sigmas is None:
        raise ConfigError(["model file asks to estimate sigma; give --sigma to simulate"])
    noise = noise_for(definition, sigmas)

    grid = TimeGrid(start=0.0, end=config.t_end, points=config.n or 201)
    params = {p: truth[p] for p in model.parameter_names}
    trajectory = solve_ode(model, params, initial_state(model, truth), grid.times, config.substeps)
    data = simulate_data(trajectory, noise, config.seed)
    path = write_series_csv(data, output_path(config.output or "simulated.csv"))
    log(f"Simulated {model.name}: {data.n} points on [0, {fmt(config.t_end)}], seed {config.seed}")
    log(f"Wrote {path}")


def cmd_mc(config: RunConfig):
    from bcls.montecarlo import consistency_sweep, run_monte_carlo, sweep_frame
    from scenarios import consistency_settings, scenario_config

    if config.scenario == "consistency":
        sigmas = parse_sigmas(config.sigma)
        settings = consistency_settings(sigmas[0] if sigmas else 0.4)
        rows = consistency_sweep(
            settings["model"], settings["truth"], settings["noise"],
            [config.n] if config.n else settings["n_values"],
            config.reps or 200, config.seed, threads=config.threads,
        )
        frame = sweep_frame(rows)
        for r in rows:
            log(f"  n={r.n:<5} {r.parameter:>3}  |bias|={fmt(r.abs_bias)}  mc_sd={fmt(r.mc_sd)}  mc_se={fmt(r.mc_se)}")
    else:
        mc_config = scenario_config(config.scenario, sigmas=parse_sigmas(config.sigma), n=config.n,
                                    replicates=config.reps, seed=config.seed, threads=config.threads,
                                    variant=config.variant, include_nls=True if config.nls else None,
                                    sigma_grid=config.sigma_grid)
        mc_config = mc_config.model_copy(update={"substeps": config.substeps})
        log(f"Running {config.scenario}: {mc_config.replicates} replicates per cell, {config.threads} threads")
        summary = run_monte_carlo(mc_config)
        frame = summary.to_frame()
        for r in summary.rows:
            conv = "" if r.conv_rate != r.conv_rate else f"  conv={r.conv_rate:.1%}"
            log(f"  {r.scenario:<28} {r.method:<18} {r.parameter:>3}  mean={fmt(r.mean)}  "
                f"mc_sd={fmt(r.mc_sd)}  bias={fmt(r.bias)}{conv}")
        for method, failed in summary.failures.items():
            if failed:
                log(f"  {method}: {failed} replicates failed or did not converge")
    path = output_path(config.output or f"mc_{config.scenario}.csv")
    frame.to_csv(path, index=False)
    log(f"Wrote {path}")


def cmd_bootstrap(config: RunConfig):
    import numpy as np

    from bcls.estimator import fit_bcls
    from bcls.loader import read_series_csv
    from bcls.montecarlo import intervals_frame, nonparametric_bootstrap, parametric_bootstrap

    definition = load_definition(config)
    model = definition.model
    data = read_series_csv(config.data, list(model.state_names))
    noise = noise_for(definition, parse_sigmas(config.sigma), data)
    if config.kind == "parametric":
        fit = fit_bcls(model, data, noise)
        intervals = parametric_bootstrap(model, fit, noise, np.asarray(data.times), config.B, config.seed,
                                         level=config.level, threads=config.threads, substeps=config.substeps)
    else:
        intervals = nonparametric_bootstrap(data, model, noise, config.B, config.seed,
                                            level=config.level, threads=config.threads)
    log(f"{config.kind.capitalize()} bootstrap, {intervals[0].B} successful resamples, level {config.level:g}:")
    for ci in intervals:
        log(f"  {ci.parameter:>6}  ({fmt(ci.lower)}, {fmt(ci.upper)})")
    path = output_path(config.output or "bootstrap.csv")
    intervals_frame(intervals).to_csv(path, index=False)
    log(f"Wrote {path}")


def cmd_surface(config: RunConfig):
    from bcls.library import builtin_model
    from bcls.nls import SurfaceAxis, local_minima, sse_surface
    from bcls.noise import NoiseModel
    from scenarios import noiseless_data, surface_truth

    model = builtin_model("fitzhugh_nagumo")
    truth = surface_truth(config.model)
    data = noiseless_data(model, truth, n=config.n or 201, substeps=config.substeps)
    a_lo, a_hi, a_steps = parse_range(config.a_range)
    b_lo, b_hi, b_steps = parse_range(config.b_range)
    observed = config.observe.split(",") if config.observe else ["R"]
    surface = sse_surface(
        model, data, NoiseModel.gaussian(0.0, 0.0),
        SurfaceAxis(parameter="a", lo=a_lo, hi=a_hi, steps=a_steps),
        SurfaceAxis(parameter="b", lo=b_lo, hi=b_hi, steps=b_steps),
        fixed={k: v for k, v in truth.items() if k not in ("a", "b")},
        observed=observed,
        substeps=config.substeps,
    )
    log(f"SSE surface for {config.model} (true a={truth['a']:g}, b={truth['b']:g}), observing {', '.join(observed)}")
    for a, b, sse in local_minima(surface):
        log(f"  local minimum near a={fmt(a)}, b={fmt(b)}  SSE={fmt(sse)}")
    path = output_path(config.output or f"surface_{config.model}.csv")
    surface.to_frame().to_csv(path, index=False)
    log(f"Wrote {path}")


def cmd_sigma(config: RunConfig):
    from bcls.loader import read_series_csv
    from bcls.noise import estimate_sigma

    definition = load_definition(config)
    model = definition.model
    data = read_series_csv(config.data, list(model.state_names))
    states = [config.state] if config.state else list(model.state_names)
    for name in states:
        if name not in model.state_names:
            raise ConfigError([f"--state: unknown state '{name}'"])
        q = model.state_names.index(name)
        spec = definition.noise.states.get(name)
        kind = config.noise_kind or (spec.kind if spec else "gaussian")
        sigma = estimate_sigma(data, q, config.df, kind)
        log(f"  {name}: sigma = {fmt(sigma)}  ({kind}, df={config.df})")


HANDLERS = {
    "estimate": cmd_estimate,
    "simulate": cmd_simulate,
    "mc": cmd_mc,
    "bootstrap": cmd_bootstrap,
    "surface": cmd_surface,
    "sigma": cmd_sigma,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Bias-corrected least squares for ODE parameters")
    subparsers = parser.add_subparsers(dest="command", required=True)

    def common(p, data: bool = False):
        p.add_argument("--model", default="logistic", help="Built-in name (logistic, fn) or model JSON path")
        if data:
            p.add_argument("--data", help="CSV with header t,<states>")
        p.add_argument("--sigma", default=None, help="Comma-separated sigma per state (overrides the model file)")
        p.add_argument("--seed", type=int, default=SEED)
        p.add_argument("--threads", type=int, default=THREADS)
        p.add_argument("--output", default=None, help="Output CSV path")

    # estimate
    estimate_parser = subparsers.add_parser("estimate", help="Fit a model to data with BCLS")
    common(estimate_parser, data=True)
    estimate_parser.add_argument("--rule", choices=["trapezoid", "left"], default="trapezoid")
    estimate_parser.add_argument("--no-bias-correction", dest="corrected", action="store_false")
    estimate_parser.add_argument("--nls", action="store_true", help="Also run NLS started from BCLS")

    # simulate
    simulate_parser = subparsers.add_parser("simulate", help="Simulate noisy observations")
    common(simulate_parser)
    simulate_parser.add_argument("--n", type=int, default=None, help="Number of time points (default 201)")
    simulate_parser.add_argument("--t-end", type=float, default=20.0)
    simulate_parser.add_argument("--param", dest="params", action="append", default=[], help="name=value")

    # mc
    mc_parser = subparsers.add_parser("mc", help="Run a preset Monte Carlo study")
    common(mc_parser)
    mc_parser.add_argument("--scenario", required=True)
    mc_parser.add_argument("--n", type=int, default=None)
    mc_parser.add_argument("--reps", type=int, default=None)
    mc_parser.add_argument("--variant", default="0.34", help="FitzHugh-Nagumo truth: 0.34 or 0.58")
    mc_parser.add_argument("--nls", action="store_true", help="table3: also fit NLS started from the truth")
    mc_parser.add_argument("--sigma-grid", action="store_true",
                           help="table3: every (sigma_V, sigma_R) pair from {0.05, 0.1, 0.15}")

    # bootstrap
    bootstrap_parser = subparsers.add_parser("bootstrap", help="Bootstrap confidence intervals")
    common(bootstrap_parser, data=True)
    bootstrap_parser.add_argument("--kind", choices=["parametric", "nonparametric"], default="parametric")
    bootstrap_parser.add_argument("--B", type=int, default=1000)
    bootstrap_parser.add_argument("--level", type=float, default=0.95)

    # surface
    surface_parser = subparsers.add_parser("surface", help="SSE surface over (a, b)")
    surface_parser.add_argument("--model", default="fn", help="fn or fn-hopf")
    surface_parser.add_argument("--a-range", default="0.3:2.2:50")
    surface_parser.add_argument("--b-range", default="0:3:50")
    surface_parser.add_argument("--observe", default=None, help="Comma-separated observed states (default R)")
    surface_parser.add_argument("--n", type=int, default=None)
    surface_parser.add_argument("--output", default=None)

    # sigma
    sigma_parser = subparsers.add_parser("sigma", help="Estimate noise levels with a spline smooth")
    sigma_parser.add_argument("--model", default="logistic")
    sigma_parser.add_argument("--data")
    sigma_parser.add_argument("--state", default=None)
    sigma_parser.add_argument("--df", type=int, default=3)
    sigma_parser.add_argument("--kind", dest="noise_kind", choices=["gaussian", "lognormal"], default=None)

    return parser


def main(argv: Optional[list[str]] = None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    values = {k: v for k, v in vars(args).items() if v is not None}
    values["substeps"] = SUBSTEPS

    try:
        config = RunConfig(**values)
    except ValueError as e:
        print(f"Invalid arguments: {e}", file=sys.stderr)
        return 2
    problems = config.violations()
    if problems:
        print("Invalid configuration:", file=sys.stderr)
        for problem in problems:
            print(f"  - {problem}", file=sys.stderr)
        return 2

    try:
        HANDLERS[config.command](config)
    except ConfigError as e:
        print("Invalid configuration:", file=sys.stderr)
        for problem in e.violations:
            print(f"  - {problem}", file=sys.stderr)
        return 2
    except BclsError as e:
        print(f"Error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
