"""Command-line interface: estimate, tune, band, and simulate subcommands.

Output files are written through a deterministic serializer (17 significant
digits, fixed key order), so seeded runs are byte-identical across
invocations.  Options may come from a flat key=value config file passed with
--config; explicit flags win over config values, which win over defaults.
"""
import argparse
import json
import os
import re
import sys

import numpy as np

from .data import load_csv
from .exceptions import (ConvergenceError, DataError, DualUnboundedError,
                         EstimationError)
from .inference import EstimateOptions, estimate_full, uniform_band
from .simulation import SimDesign, run_monte_carlo

__all__ = ["main", "run_cli"]

_RUNTIME_ERRORS = (ConvergenceError, DataError, DualUnboundedError,
                   EstimationError, ValueError, np.linalg.LinAlgError)
_GAMMA_RULES = {"min": "min", "one_se": "one_se", "1se": "one_se",
                "two_se": "two_se", "2se": "two_se"}
_NOISE_OF = {"homo": "homoscedastic", "hetero": "heteroscedastic"}
_SHAPE_OF = {"sparse": "sparse", "pseudo": "pseudo_dense",
             "pseudo_dense": "pseudo_dense", "dense": "dense"}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


# ---------------------------------------------------------------------------
# Deterministic serialization
# ---------------------------------------------------------------------------

def _fmt_float(x):
    x = float(x)
    if not np.isfinite(x):
        raise EstimationError("non-finite value in output")
    return format(x, ".17g")


def _to_json(obj):
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt_float(obj)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return _to_json(obj.tolist())
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {_to_json(v)}" for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_to_json(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _write_json(path, payload):
    text = _to_json(payload) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _write_table(path, header, rows):
    """CSV with .17g floats; None becomes an empty field."""
    lines = [",".join(header)]
    for row in rows:
        fields = []
        for v in row:
            if v is None:
                fields.append("")
            elif isinstance(v, str):
                fields.append(v)
            elif isinstance(v, (int, np.integer)):
                fields.append(str(int(v)))
            else:
                fields.append(_fmt_float(v))
        lines.append(",".join(fields))
    text = "\n".join(lines) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


# ---------------------------------------------------------------------------
# Option plumbing: argparse defaults are all None so a --config file can fill
# anything the command line left unset; hard defaults live in _DEFAULTS.
# ---------------------------------------------------------------------------

def _parse_bool(text):
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_gamma_rule(text):
    key = str(text).strip().lower()
    if key not in _GAMMA_RULES:
        raise ValueError(f"gamma rule must be one of min/1se/2se, got {text!r}")
    return _GAMMA_RULES[key]


def _parse_design_token(text):
    parts = str(text).strip().lower().split("-")
    if len(parts) != 2 or parts[0] not in _NOISE_OF or parts[1] not in _SHAPE_OF:
        raise ValueError(
            f"design must look like homo-sparse / hetero-dense, got {text!r}")
    return _NOISE_OF[parts[0]], _SHAPE_OF[parts[1]]


def _parse_z_shape(text):
    key = str(text).strip().lower()
    if key not in ("sparse", "dense"):
        raise ValueError(f"z shape must be sparse or dense, got {text!r}")
    return key


def _parse_estimators(text):
    names = [t.strip() for t in str(text).split(",") if t.strip()]
    if not names:
        raise ValueError("estimator list is empty")
    return tuple(names)


_CONVERT = {
    "data": str, "z": str, "out": str, "plot": str, "csv": str,
    "estimate": str, "config": str,
    "tau": str,
    "level": float, "theta1_norm": float, "gamma": float, "lam": float,
    "bandwidth": float,
    "folds": int, "seed": int, "threads": int, "band_draws": int,
    "draws": int, "n": int, "p": int, "reps": int,
    "add_intercept": _parse_bool, "band": _parse_bool,
    "integrated": _parse_bool,
    "gamma_rule": _parse_gamma_rule, "design": _parse_design_token,
    "z_shape": _parse_z_shape, "estimators": _parse_estimators,
}

_DEFAULTS = {
    "estimate": {"data": None, "z": None, "tau": None, "out": None,
                 "plot": None, "add_intercept": False, "level": 0.95,
                 "folds": 10, "gamma_rule": "one_se", "gamma": None,
                 "lam": None, "bandwidth": None, "band": True,
                 "band_draws": 100_000, "integrated": False, "seed": 0,
                 "threads": None},
    "tune": {"data": None, "z": None, "tau": None, "out": None,
             "add_intercept": False, "level": 0.95, "folds": 10,
             "gamma_rule": "one_se", "seed": 0, "threads": None},
    "band": {"estimate": None, "out": None, "level": None, "draws": 100_000,
             "seed": 0, "threads": None},
    "simulate": {"design": None, "n": 400, "p": 50, "reps": 50,
                 "tau": "0.25,0.5,0.75", "theta1_norm": 1.0,
                 "z_shape": "sparse",
                 "estimators": ("rank_1se", "rank_2se", "refit", "lasso"),
                 "level": 0.95, "seed": 0, "out": None, "csv": None,
                 "threads": None},
}


def _load_config(path):
    cfg = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise _UsageError(
                    f"config {path} line {lineno}: expected key=value")
            key, _, value = line.partition("=")
            cfg[key.strip().lower().replace("-", "_")] = value.strip()
    return cfg


def _resolve_options(args):
    """Fill unset options from the config file, then from hard defaults."""
    cfg = _load_config(args.config) if args.config else {}
    known = _DEFAULTS[args.command]
    for key in cfg:
        if key not in known:
            raise _UsageError(f"config key {key!r} not recognized for "
                              f"'{args.command}'")
    for dest, default in known.items():
        if getattr(args, dest, None) is not None:
            continue
        if dest in cfg:
            try:
                value = _CONVERT[dest](cfg[dest])
            except ValueError as err:
                raise _UsageError(f"config key {dest!r}: {err}")
        else:
            value = default
        setattr(args, dest, value)


def _require(args, dest, flag):
    if getattr(args, dest) is None:
        raise _UsageError(f"{flag} is required")
    return getattr(args, dest)


def _resolve_threads(args):
    if args.threads is not None:
        value = args.threads
    else:
        env = os.environ.get("RANKSCORE_THREADS", "").strip()
        if not env:
            return 1
        try:
            value = int(env)
        except ValueError:
            raise _UsageError(f"RANKSCORE_THREADS must be an integer, "
                              f"got {env!r}")
    if value < 1:
        raise _UsageError("thread count must be >= 1")
    return value


def _parse_tau_list(value):
    chunks = value if isinstance(value, (list, tuple)) else [value]
    taus = []
    for chunk in chunks:
        for tok in str(chunk).split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                taus.append(float(tok))
            except ValueError:
                raise _UsageError(f"could not parse quantile level {tok!r}")
    if not taus:
        raise _UsageError("--tau needs at least one value")
    return taus


_NUMBER_RE = re.compile(r"^[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")


def _read_z(arg, p):
    if os.path.exists(arg):
        with open(arg) as fh:
            tokens = [t for t in re.split(r"[,\s]+", fh.read().strip()) if t]
        if tokens and not _NUMBER_RE.match(tokens[0]):
            tokens = tokens[1:]  # tolerate a single header token
    else:
        tokens = [t.strip() for t in arg.split(",") if t.strip()]
    try:
        z = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError:
        raise DataError(f"could not parse z from {arg!r}: pass a file of "
                        "numbers or a comma-separated list")
    if z.size != p:
        raise DataError(f"z has length {z.size} but the design has "
                        f"p={p} columns")
    return z


# ---------------------------------------------------------------------------
# Payload builders (field order here defines the output schema)
# ---------------------------------------------------------------------------

def _estimate_payload(result, z):
    gamma = {f"arm{d}": [rec.gamma for rec in arm.records]
             for d, arm in ((1, result.arm1), (0, result.arm0))}
    return {
        "tau": result.tau_grid,
        "alpha_hat": result.alpha_hat,
        "sigma2": result.sigma2,
        "ci_low": result.ci_low,
        "ci_high": result.ci_high,
        "level": result.level,
        "n": result.diagnostics["n"],
        "p": result.diagnostics["p"],
        "z": z,
        "lambda": {"arm1": result.arm1.lam, "arm0": result.arm0.lam},
        "gamma": gamma,
        "kappa": result.kappa,
        "band_low": result.band_low,
        "band_high": result.band_high,
        "integrated": result.integrated,
        "H1": result.H1,
        "H0": result.H0,
        "diagnostics": result.diagnostics,
    }


def _plot_rows(result):
    m = result.tau_grid.size
    none_col = [None] * m
    lows = result.band_low if result.band_low is not None else none_col
    highs = result.band_high if result.band_high is not None else none_col
    return [(result.tau_grid[j], result.alpha_hat[j], result.ci_low[j],
             result.ci_high[j], lows[j], highs[j]) for j in range(m)]


def _cv_payload(rec):
    cv = rec.cv
    return {
        "tau": rec.tau,
        "gamma": rec.gamma,
        "gamma_min": cv.gamma_min,
        "gamma_one_se": cv.gamma_one_se,
        "gamma_two_se": cv.gamma_two_se,
        "n_failed": cv.n_failed,
        "grid": cv.grid,
        "mean_risk": cv.mean_risk,
        "se_risk": cv.se_risk,
    }


def _metrics_rows(metrics):
    header = ["estimator", "tau", "true_alpha", "n_used", "sqrt_n_bias",
              "sqrt_n_bias_se", "n_variance", "n_variance_se", "coverage",
              "coverage_se"]
    rows = [tuple(row[k] for k in header) for row in metrics.rows]
    return header, rows


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_estimate(args):
    _resolve_threads(args)
    data_path = _require(args, "data", "--data")
    z_arg = _require(args, "z", "--z")
    out = _require(args, "out", "--out")
    taus = _parse_tau_list(_require(args, "tau", "--tau"))
    dataset = load_csv(data_path, add_intercept=args.add_intercept)
    z = _read_z(z_arg, dataset.p)
    opts = EstimateOptions(level=args.level, folds=args.folds,
                           gamma_rule=args.gamma_rule,
                           gamma_override=args.gamma,
                           lambda_override=args.lam,
                           bandwidth_override=args.bandwidth,
                           band=args.band, band_draws=args.band_draws,
                           integrated=args.integrated, seed=args.seed)
    result = estimate_full(dataset, z, taus, opts)
    _write_json(out, _estimate_payload(result, z))
    plot = args.plot or os.path.splitext(out)[0] + ".csv"
    _write_table(plot, ["tau", "alpha_hat", "ci_low", "ci_high", "band_low",
                        "band_high"], _plot_rows(result))
    return 0


def _cmd_tune(args):
    _resolve_threads(args)
    data_path = _require(args, "data", "--data")
    z_arg = _require(args, "z", "--z")
    taus = _parse_tau_list(_require(args, "tau", "--tau"))
    dataset = load_csv(data_path, add_intercept=args.add_intercept)
    z = _read_z(z_arg, dataset.p)
    opts = EstimateOptions(level=args.level, folds=args.folds,
                           gamma_rule=args.gamma_rule, band=False,
                           seed=args.seed, keep_cv=True)
    result = estimate_full(dataset, z, taus, opts)
    payload = {
        "tau": result.tau_grid,
        "gamma_rule": args.gamma_rule,
        "folds": args.folds,
        "lambda": {"arm1": result.arm1.lam, "arm0": result.arm0.lam},
        "arm1": [_cv_payload(rec) for rec in result.arm1.records],
        "arm0": [_cv_payload(rec) for rec in result.arm0.records],
    }
    _write_json(args.out, payload)
    return 0


def _cmd_band(args):
    _resolve_threads(args)
    source = _require(args, "estimate", "--estimate")
    with open(source) as fh:
        saved = json.load(fh)
    try:
        taus = np.asarray(saved["tau"], dtype=np.float64)
        alpha = np.asarray(saved["alpha_hat"], dtype=np.float64)
        sigma2 = np.asarray(saved["sigma2"], dtype=np.float64)
        H1 = np.asarray(saved["H1"], dtype=np.float64)
        H0 = np.asarray(saved["H0"], dtype=np.float64)
        n_total = int(saved["n"])
        level = args.level if args.level is not None else float(saved["level"])
    except KeyError as err:
        raise DataError(f"estimate file {source} is missing field {err}")
    kappa, (low, high) = uniform_band(H1, H0, sigma2, alpha, n_total,
                                      level=level, n_draws=args.draws,
                                      seed=args.seed)
    payload = {
        "level": level,
        "n_draws": args.draws,
        "seed": args.seed,
        "kappa": kappa,
        "tau": taus,
        "alpha_hat": alpha,
        "band_low": low,
        "band_high": high,
    }
    _write_json(args.out, payload)
    return 0


def _cmd_simulate(args):
    n_workers = _resolve_threads(args)
    design_token = _require(args, "design", "--design")
    if isinstance(design_token, str):
        try:
            design_token = _parse_design_token(design_token)
        except ValueError as err:
            raise _UsageError(str(err))
    noise, theta1_shape = design_token
    taus = _parse_tau_list(args.tau)
    design = SimDesign(n=args.n, p=args.p, noise=noise,
                       theta1_shape=theta1_shape,
                       theta1_norm=args.theta1_norm, z_shape=args.z_shape)
    metrics = run_monte_carlo(design, taus, args.reps,
                              estimators=args.estimators,
                              n_workers=n_workers, seed=args.seed,
                              level=args.level)
    payload = {
        "design": {"n": design.n, "p": design.p, "noise": design.noise,
                   "theta1_shape": design.theta1_shape,
                   "theta1_norm": design.theta1_norm,
                   "z_shape": design.z_shape},
        "tau": taus,
        "n_reps": metrics.n_reps,
        "estimators": list(metrics.estimators),
        "level": args.level,
        "seed": args.seed,
        "failures": {k: metrics.failures[k] for k in metrics.estimators},
        "rows": list(metrics.rows),
    }
    _write_json(args.out, payload)
    if args.csv is not None:
        header, rows = _metrics_rows(metrics)
        _write_table(args.csv, header, rows)
    return 0


_DISPATCH = {"estimate": _cmd_estimate, "tune": _cmd_tune, "band": _cmd_band,
             "simulate": _cmd_simulate}


def build_parser():
    parser = _Parser(prog="rankscore",
                     description="Rank-score debiased inference for "
                                 "heterogeneous quantile treatment effects.")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="{estimate,tune,band,simulate}")

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file; "
                                        "explicit flags win")
        p.add_argument("--threads", type=int,
                       help="worker processes for simulate (default: "
                            "RANKSCORE_THREADS or 1)")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")

    pe = sub.add_parser("estimate", description="Estimate the HQTE curve "
                        "with pointwise intervals and a uniform band.")
    pe.add_argument("--data", help="CSV with header y,d,x1,...,xp")
    pe.add_argument("--z", help="covariate profile: file or comma-separated "
                                "numbers, length p")
    pe.add_argument("--tau", action="append",
                    help="quantile level(s); repeat or comma-separate")
    pe.add_argument("--out", help="output JSON path")
    pe.add_argument("--plot", help="plot CSV path (default: --out with .csv)")
    pe.add_argument("--add-intercept", dest="add_intercept",
                    action="store_const", const=True,
                    help="prepend an all-ones column to x")
    pe.add_argument("--level", type=float, help="confidence level (0.95)")
    pe.add_argument("--folds", type=int, help="CV folds for gamma (10)")
    pe.add_argument("--gamma-rule", dest="gamma_rule", type=_parse_gamma_rule,
                    help="gamma selection rule: min, 1se, or 2se (1se)")
    pe.add_argument("--gamma", type=float, help="fixed gamma (skips CV)")
    pe.add_argument("--lambda", dest="lam", type=float,
                    help="fixed lambda (skips simulation rule)")
    pe.add_argument("--bandwidth", type=float,
                    help="density bandwidth override")
    pe.add_argument("--no-band", dest="band", action="store_const",
                    const=False, help="skip the uniform band")
    pe.add_argument("--band-draws", dest="band_draws", type=int,
                    help="Gaussian draws for the band (100000)")
    pe.add_argument("--integrated", action="store_const", const=True,
                    help="also report the integrated HQTE over the grid")
    add_common(pe)

    pt = sub.add_parser("tune", description="Report selected lambda/gamma "
                        "with the gamma CV curves.")
    pt.add_argument("--data")
    pt.add_argument("--z")
    pt.add_argument("--tau", action="append")
    pt.add_argument("--out", help="output JSON path (default: stdout)")
    pt.add_argument("--add-intercept", dest="add_intercept",
                    action="store_const", const=True)
    pt.add_argument("--level", type=float)
    pt.add_argument("--folds", type=int)
    pt.add_argument("--gamma-rule", dest="gamma_rule", type=_parse_gamma_rule)
    add_common(pt)

    pb = sub.add_parser("band", description="Recompute the uniform band "
                        "from a saved estimate JSON.")
    pb.add_argument("--estimate", help="JSON written by the estimate command")
    pb.add_argument("--out", help="output JSON path (default: stdout)")
    pb.add_argument("--level", type=float,
                    help="band level (default: saved level)")
    pb.add_argument("--draws", type=int, help="Gaussian draws (100000)")
    add_common(pb)

    ps = sub.add_parser("simulate", description="Monte Carlo study on a "
                        "built-in design.")
    ps.add_argument("--design", help="noise-shape token, e.g. homo-sparse, "
                                     "hetero-dense, homo-pseudo")
    ps.add_argument("--n", type=int, help="sample size (400)")
    ps.add_argument("--p", type=int, help="covariate count incl. intercept "
                                          "(50)")
    ps.add_argument("--reps", type=int, help="Monte Carlo replications (50)")
    ps.add_argument("--tau", action="append",
                    help="quantile level(s) (0.25,0.5,0.75)")
    ps.add_argument("--theta1-norm", dest="theta1_norm", type=float,
                    help="l2 norm of the treated-arm coefficients (1)")
    ps.add_argument("--z-shape", dest="z_shape", type=_parse_z_shape,
                    help="covariate profile: sparse or dense (sparse)")
    ps.add_argument("--estimators", type=_parse_estimators,
                    help="comma list from oracle,refit,lasso,rank_min,"
                         "rank_1se,rank_2se")
    ps.add_argument("--level", type=float, help="CI level (0.95)")
    ps.add_argument("--out", help="output JSON path (default: stdout)")
    ps.add_argument("--csv", help="also write the metrics table as CSV")
    add_common(ps)

    return parser


def run_cli(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _resolve_options(args)
        return _DISPATCH[args.command](args)
    except _UsageError as err:
        sys.stderr.write(_error_line("usage", str(err)))
        return 2
    except FileNotFoundError as err:
        name = getattr(err, "filename", None) or str(err)
        sys.stderr.write(_error_line("usage", f"missing input file: {name}"))
        return 2
    except _RUNTIME_ERRORS as err:
        sys.stderr.write(_error_line(type(err).__name__, str(err)))
        return 1


def _error_line(kind, message):
    return json.dumps({"error": kind,
                       "message": " ".join(str(message).split())}) + "\n"


def main():
    sys.exit(run_cli(sys.argv[1:]))


if __name__ == "__main__":
    main()
