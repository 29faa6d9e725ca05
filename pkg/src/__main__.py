"""
Main entry point for ssmkit
Fits, filters, smooths, simulates, predicts and diagnoses state space
models described by a spec file over CSV data
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from .approx import filter_nongaussian
from .config import Config
from .errors import SSMError
from .filtering import kalman_filter
from .inference import (
    RESIDUAL_KINDS,
    autocorrelations,
    coefficients,
    fit,
    fitted,
    kfs,
    predict,
    residuals,
)
from .model import validate
from .simulation import TARGETS, importance_sample, simulate_conditional
from .specfile import (
    BuiltModel,
    build_model,
    check_seed,
    horizon_model,
    load_spec,
    read_frame,
    read_horizon,
    read_parameters,
    spec_violations,
)

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NUMERIC = 2


def setup_logging(verbose: bool = False, level_name: Optional[str] = None):
    """Setup logging configuration"""
    if verbose:
        level = logging.DEBUG
    else:
        level = getattr(logging, (level_name or os.getenv("SSMKIT_LOG", "INFO")).upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[logging.StreamHandler(sys.stdout)],
        force=True,
    )


class Run:
    """Options of one command after merging config, spec and flags"""

    def __init__(self, args: argparse.Namespace, config: Config, built: BuiltModel):
        fit_opts = built.spec.fit
        self.args = args
        self.built = built
        self.out = Path(args.out or config.output_dir)
        self.seed = _first(args.seed, fit_opts.get("seed"), config.seed)
        self.nsim = int(_first(args.nsim, fit_opts.get("nsim"), config.nsim))
        self.threads = int(_first(args.threads, config.threads))
        self.level = float(_first(args.level, config.level))
        self.optimizer = _first(args.optimizer, fit_opts.get("optimizer"), config.optimizer)
        self.maxiter = _first(args.maxiter, fit_opts.get("maxiter"), config.maxiter)
        self.antithetics = bool(_first(fit_opts.get("antithetics"), config.antithetics))
        self.starts = fit_opts.get("starts") or []
        self.two_stage = bool(fit_opts.get("two_stage", False))
        params = args.params or fit_opts.get("parameters")
        self.params_path = built.spec.resolve(params) if params and not args.params else params

    def write(self, name: str, frame: pd.DataFrame) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        path = self.out / name
        frame.to_csv(path, index=False, na_rep="")
        logging.getLogger("Main").info(f"Wrote {path}")
        return path


def _first(*values):
    for value in values:
        if value is not None:
            return value
    return None


def _states_frame(times, names, mean, var) -> pd.DataFrame:
    n, m = mean.shape
    sd = np.sqrt(np.clip(var, 0.0, None))
    return pd.DataFrame(
        {
            "t": np.repeat(times, m),
            "state": np.tile(names, n),
            "mean": mean.reshape(-1),
            "sd": sd.reshape(-1),
        }
    )


def _series_frame(times, names, mean, var) -> pd.DataFrame:
    frame = _states_frame(times, names, mean, var)
    return frame.rename(columns={"state": "series"})


def _parameters(run: Run):
    """Parameters from a file, the model itself, or a fit"""
    logger = logging.getLogger("Main")
    assembled = run.built.assembled
    if not assembled.unknowns:
        return np.zeros(0), None
    if run.params_path:
        logger.info(f"Using fixed parameters from {run.params_path}")
        return read_parameters(run.params_path, assembled.parameter_names), None
    logger.info(f"Estimating {assembled.n_params} parameters")
    result = fit(
        assembled,
        method=run.optimizer,
        nsim=run.nsim,
        seed=run.seed,
        antithetics=run.antithetics,
        maxiter=run.maxiter,
        starts=run.starts,
        threads=run.threads,
        two_stage=run.two_stage,
    )
    return result.parameters, result


def cmd_validate(args: argparse.Namespace, config: Config) -> int:
    """Print spec and model violations"""
    spec = load_spec(args.spec)
    frame = read_frame(spec)
    violations = spec_violations(spec, frame)
    if not violations:
        built = build_model(spec, frame, strict=False)
        violations = validate(built.assembled.model)
    if violations:
        print(f"{len(violations)} violation(s) in {args.spec}:")
        for v in violations:
            print(f"  {v.code}: {v.message}")
        return EXIT_INPUT
    print(f"{args.spec}: OK")
    return EXIT_OK


def cmd_fit(run: Run) -> int:
    """Estimate parameters and write params, states, coefficients, fitted values and loglik"""
    logger = logging.getLogger("Main")
    assembled = run.built.assembled
    x, result = _parameters(run)
    model = assembled.update(x) if assembled.unknowns else assembled.model
    out = kfs(model, run.nsim, run.seed, run.antithetics, run.threads)
    converged = True if result is None else result.converged

    natural = assembled.natural_parameters(x)
    run.write(
        "params.csv",
        pd.DataFrame(
            {
                "name": assembled.parameter_names,
                "estimate": x,
                "transformed": [natural[name] for name in assembled.parameter_names],
            }
        ),
    )
    var = np.einsum("tmm->tm", out.V)
    run.write("states.csv", _states_frame(run.built.times, model.state_names, out.alphahat, var))
    coef = coefficients(out)
    run.write(
        "coefficients.csv",
        pd.DataFrame({"state": coef.names, "estimate": coef.estimate, "se": coef.se}),
    )
    run.write(
        "fitted.csv", _series_frame(run.built.times, model.series_names, fitted(out), out.Vmu)
    )

    loglik = out.loglik.to_dict()
    loglik["converged"] = converged
    run.out.mkdir(parents=True, exist_ok=True)
    with open(run.out / "loglik.json", "w") as f:
        json.dump(loglik, f, indent=2)
    logger.info(f"logLik = {out.loglik.value:.6f} ({out.loglik.method})")
    if not converged:
        logger.error("Optimization did not converge; outputs are flagged with converged=false")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_filter(run: Run) -> int:
    """Write one-step-ahead state predictions to filtered.csv"""
    x, _ = _parameters(run)
    model, _ = horizon_model(run.built, x)
    if model.gaussian:
        fr = kalman_filter(model)
        mean = fr.a[: model.n]
        var = np.einsum("tmm->tm", fr.P[: model.n]).copy()
        for t in range(fr.d):
            var[t, np.diag(fr.Pinf[t]) > 0] = np.nan
    else:
        nf = filter_nongaussian(model, run.nsim, run.seed, run.antithetics)
        mean = nf.alpha
        var = np.einsum("tmm->tm", nf.Valpha).copy()
    run.write("filtered.csv", _states_frame(run.built.times, model.state_names, mean, var))
    return EXIT_OK


def cmd_smooth(run: Run) -> int:
    """Write smoothed states and signals"""
    x, _ = _parameters(run)
    model, _ = horizon_model(run.built, x)
    out = kfs(model, run.nsim, run.seed, run.antithetics, run.threads)
    times = run.built.times
    var = np.einsum("tmm->tm", out.V)
    run.write("states.csv", _states_frame(times, model.state_names, out.alphahat, var))
    run.write("signal.csv", _series_frame(times, model.series_names, out.theta, out.Vtheta))
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    """Write conditional draws with their log importance weights"""
    check_seed(max(run.args.draws, 1), run.seed)
    x, _ = _parameters(run)
    model, _ = horizon_model(run.built, x)
    what = run.args.what
    if model.gaussian:
        sample = simulate_conditional(
            model, what, run.args.draws, run.seed, run.antithetics, run.threads
        )
    else:
        sample = importance_sample(
            model, what, run.args.draws, run.seed, run.antithetics, threads=run.threads
        )
    if what == "states":
        names = list(model.state_names)
    elif what == "disturbances":
        names = [f"eps.{s}" for s in model.series_names] + list(model.eta_names)
    else:
        names = list(model.series_names)
    draws = sample.draws
    nsim, n, q = draws.shape
    run.write(
        "simulated.csv",
        pd.DataFrame(
            {
                "draw": np.repeat(np.arange(1, nsim + 1), n * q),
                "t": np.tile(np.repeat(run.built.times, q), nsim),
                "name": np.tile(names, nsim * n),
                "value": draws.reshape(-1),
            }
        ),
    )
    run.write(
        "weights.csv",
        pd.DataFrame({"draw": np.arange(1, nsim + 1), "logweight": sample.logweights}),
    )
    return EXIT_OK


def cmd_predict(run: Run) -> int:
    """Write point predictions and interval bounds to forecast.csv"""
    x, _ = _parameters(run)
    built = run.built
    model, newdata = horizon_model(built, x)
    horizon = built.horizon if newdata is not None else int(run.args.n_ahead or 0)
    if not model.gaussian:
        check_seed(run.nsim, run.seed)
    forecast = predict(
        model,
        horizon=horizon,
        newdata=newdata,
        interval=run.args.interval,
        level=run.level,
        nsim=run.nsim,
        seed=run.seed,
        antithetics=run.antithetics,
        threads=run.threads,
    )
    if newdata is not None:
        times = built.future_times
    elif horizon > 0:
        times = np.arange(model.n + 1, model.n + horizon + 1)
    else:
        times = built.times
    h, p = forecast.mean.shape
    run.write(
        "forecast.csv",
        pd.DataFrame(
            {
                "t": np.repeat(times, p),
                "series": np.tile(forecast.series_names, h),
                "point": forecast.mean.reshape(-1),
                "lower": forecast.lower.reshape(-1),
                "upper": forecast.upper.reshape(-1),
            }
        ),
    )
    return EXIT_OK


def cmd_residuals(run: Run) -> int:
    """Write residuals.csv and acf.csv"""
    x, _ = _parameters(run)
    model, _ = horizon_model(run.built, x)
    kind = run.args.kind
    if not model.gaussian:
        check_seed(run.nsim, run.seed)
    res = residuals(model, run.nsim, run.seed, proper_prior=run.args.proper_prior)
    values = res.get(kind)
    if kind == "quadratic":
        columns = ["quadratic"]
    elif kind == "auxiliary":
        columns = [f"eps.{s}" for s in model.series_names] + [
            f"eta.{e}" for e in model.eta_names
        ]
    else:
        columns = list(model.series_names)
    table = pd.DataFrame(values, columns=columns)
    table.insert(0, "t", run.built.times)
    run.write("residuals.csv", table)

    acf = autocorrelations(values, max_lag=10)
    lags, p, _ = acf.shape
    rows = [
        {"lag": lag, "series-pair": f"{columns[i]}:{columns[j]}", "correlation": acf[lag, i, j]}
        for lag in range(lags)
        for i in range(p)
        for j in range(p)
    ]
    run.write("acf.csv", pd.DataFrame(rows, columns=["lag", "series-pair", "correlation"]))
    return EXIT_OK


HANDLERS = {
    "fit": cmd_fit,
    "filter": cmd_filter,
    "smooth": cmd_smooth,
    "simulate": cmd_simulate,
    "predict": cmd_predict,
    "residuals": cmd_residuals,
}


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per operation"""
    parser = argparse.ArgumentParser(
        prog="ssmkit",
        description="Fit and analyse linear and exponential family state space models",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Check a spec file against its data
  ssmkit validate --spec model.yaml

  # Estimate unknown variances and write params.csv, states.csv, loglik.json
  ssmkit fit --spec model.yaml --out results/

  # Non-gaussian fit with importance sampling
  ssmkit fit --spec counts.yaml --nsim 250 --seed 1

  # Forecast with 95% prediction intervals from a horizon file
  ssmkit predict --spec model.yaml --horizon future.csv --interval prediction

  # Recursive residuals and their autocorrelations
  ssmkit residuals --spec model.yaml --kind recursive

  # Show current configuration
  ssmkit --show-config

  # Verbose output for debugging
  ssmkit --verbose fit --spec model.yaml
        """,
    )
    parser.add_argument("--config", type=str, help="Path to config file (YAML format)")
    parser.add_argument(
        "--show-config", action="store_true", help="Show current configuration and exit"
    )
    parser.add_argument(
        "--verbose", "-v", action="store_true", help="Verbose output for debugging"
    )

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--spec", required=True, help="Model spec file (YAML or JSON)")
    common.add_argument("--out", "-o", type=str, help="Output directory")
    common.add_argument("--seed", type=int, help="Random seed for simulation")
    common.add_argument(
        "--nsim", type=int, help="Importance draws for non-gaussian models (0 = mode only)"
    )
    common.add_argument("--threads", type=int, help="Worker threads for simulation")
    common.add_argument("--params", type=str, help="params.csv with fixed parameter values")
    common.add_argument(
        "--optimizer", choices=["Nelder-Mead", "BFGS"], help="Optimizer for fitting"
    )
    common.add_argument("--maxiter", type=int, help="Optimizer iteration limit")

    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.add_parser("validate", parents=[common], help="Check the spec and the model")
    sub.add_parser("fit", parents=[common], help="Estimate unknown parameters")
    sub.add_parser("filter", parents=[common], help="One-step-ahead state predictions")
    sub.add_parser("smooth", parents=[common], help="Smoothed states and signals")

    simulate = sub.add_parser("simulate", parents=[common], help="Conditional simulation")
    simulate.add_argument("--what", choices=TARGETS, default="states")
    simulate.add_argument("--draws", type=int, default=100, help="Independent draws")

    predict_p = sub.add_parser("predict", parents=[common], help="Predictions and intervals")
    predict_p.add_argument("--horizon", type=str, help="CSV with future covariates/exposures")
    predict_p.add_argument("--n-ahead", type=int, help="Steps ahead for models without covariates")
    predict_p.add_argument(
        "--interval", choices=["confidence", "prediction"], default="confidence"
    )
    predict_p.add_argument("--level", type=float, help="Interval coverage (default 0.95)")

    resid = sub.add_parser("residuals", parents=[common], help="Residual diagnostics")
    resid.add_argument("--kind", choices=RESIDUAL_KINDS, default="recursive")
    resid.add_argument(
        "--proper-prior",
        action="store_true",
        help="Replace diffuse priors by a vague proper prior",
    )
    return parser


def _load_config(args: argparse.Namespace) -> Config:
    if args.config:
        return Config.from_file(Path(args.config))
    return Config.load()


def run(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, dispatch the command and return the exit code"""
    parser = build_parser()
    args = parser.parse_args(argv)

    # Load environment variables from .env file
    load_dotenv()

    try:
        config = _load_config(args)
    except Exception as e:
        setup_logging(args.verbose)
        logging.getLogger("Main").error(f"Failed to load configuration: {str(e)}")
        return EXIT_INPUT

    setup_logging(args.verbose, config.log_level)
    logger = logging.getLogger("Main")

    if args.show_config:
        print("\n=== Current Configuration ===")
        for key, value in asdict(config).items():
            print(f"{key}: {value}")
        print()
        return EXIT_OK

    if args.command is None:
        parser.print_help()
        return EXIT_INPUT

    if not config.validate():
        logger.error("Invalid configuration. Please check your settings.")
        return EXIT_INPUT

    if not hasattr(args, "level"):
        args.level = None

    try:
        if args.command == "validate":
            return cmd_validate(args, config)
        spec = load_spec(args.spec)
        frame = read_frame(spec)
        horizon = None
        if args.command == "predict" and (args.horizon or spec.horizon.get("path")):
            horizon = read_horizon(spec, args.horizon)
        built = build_model(spec, frame, horizon)
        current = Run(args, config, built)
        if current.nsim > 0:
            check_seed(current.nsim, current.seed)
        return HANDLERS[args.command](current)
    except (ArithmeticError, np.linalg.LinAlgError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERIC
    except (SSMError, FileNotFoundError, KeyError) as e:
        logger.error(str(e))
        return EXIT_INPUT


def main():
    """Main entry point"""
    sys.exit(run())


if __name__ == "__main__":
    main()
