"""Simulation designs, comparator estimators, and the Monte Carlo harness.

The generative model: covariates from an AR(0.5) Gaussian vector with an
intercept, logistic treatment assignment driven by two covariates, and
linear-in-covariates potential outcomes with homoscedastic or
location-scale (heteroscedastic) noise, so the true conditional quantile
functions stay linear and the HQTE at any z is available in closed form.
"""
import numpy as np
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from scipy.special import expit
from scipy.stats import norm

from .data import Dataset
from .density import bandwidth, densities_from_coefficients
from .exceptions import (ConvergenceError, DataError, DualUnboundedError,
                         EstimationError)
from .inference import EstimateOptions, _estimate_arm, pointwise_ci
from .qr import (DEFAULT_SETTINGS, _intercept_column, penalty_loadings,
                 refit_qr, select_lambda, solve_penalized_qr)

__all__ = ["SimDesign", "McMetrics", "generate_dataset", "comparator_fit",
           "run_monte_carlo", "ESTIMATORS"]

NOISE_KINDS = ("homoscedastic", "heteroscedastic")
THETA1_SHAPES = ("sparse", "pseudo_dense", "dense")
Z_SHAPES = ("sparse", "dense")
ESTIMATORS = ("oracle", "refit", "lasso", "rank_min", "rank_1se", "rank_2se")
_RULE_OF = {"rank_min": "min", "rank_1se": "one_se", "rank_2se": "two_se"}


@dataclass(frozen=True)
class SimDesign:
    """One cell of the simulation grid."""
    n: int
    p: int
    noise: str = "homoscedastic"
    theta1_shape: str = "sparse"
    theta1_norm: float = 1.0
    z_shape: str = "sparse"
    seed: int = None

    def __post_init__(self):
        if self.p < 9:
            raise DataError("designs need p >= 9 (the propensity uses X7, X8)")
        if self.noise not in NOISE_KINDS:
            raise DataError(f"noise must be one of {NOISE_KINDS}")
        if self.theta1_shape not in THETA1_SHAPES:
            raise DataError(f"theta1_shape must be one of {THETA1_SHAPES}")
        if self.z_shape not in Z_SHAPES:
            raise DataError(f"z_shape must be one of {Z_SHAPES}")
        if self.theta1_norm <= 0.0:
            raise DataError("theta1_norm must be positive")

    def theta(self, d):
        """Coefficient vector of arm d (the tau-independent part)."""
        p = self.p
        if d == 0:
            out = np.zeros(p)
            out[0], out[2], out[3] = 0.5, 1.0, -1.0
            return out
        if self.theta1_shape == "sparse":
            base = np.zeros(p)
            base[:6] = 1.0
        elif self.theta1_shape == "pseudo_dense":
            base = 1.0 / np.arange(1, p + 1)
        else:
            base = 1.0 / np.sqrt(np.arange(1, p + 1))
        return base * (self.theta1_norm / np.linalg.norm(base))

    def z(self):
        out = np.zeros(self.p)
        if self.z_shape == "sparse":
            out[1] = out[2] = 1.0 / np.sqrt(2.0)
        else:
            out[0] = 1.0
            out[1:] = 1.0 / np.sqrt(np.arange(1, self.p))
        return out

    def scale_column(self, d):
        """Column whose coefficient carries the tau-dependence of theta_d(tau)."""
        if self.noise == "homoscedastic":
            return 0
        return 2 if d == 1 else 1

    def quantile_coefficients(self, d, tau):
        """theta_d(tau): the induced linear CQF coefficients of arm d."""
        out = self.theta(d).copy()
        out[self.scale_column(d)] += norm.ppf(tau)
        return out

    def true_support(self, d):
        """Covariates active in theta_d(tau) over the quantile range."""
        active = set(np.flatnonzero(self.theta(d)).tolist())
        active.add(0)
        active.add(self.scale_column(d))
        return np.array(sorted(active), dtype=np.intp)

    def true_alpha(self, tau):
        """alpha(tau; z) = z'(theta_1(tau) - theta_0(tau)) in closed form."""
        z = self.z()
        base = float(z @ (self.theta(1) - self.theta(0)))
        if self.noise == "homoscedastic":
            return base
        return base + float(norm.ppf(tau)) * (z[2] - z[1])


def generate_dataset(design, rng):
    """Draw one dataset; returns (Dataset, true_alpha function).

    Draw order (fixed for reproducibility): the n x (p-1) innovation block
    for the AR covariates, then n propensity uniforms, then n noise values.
    """
    n, p = design.n, design.p
    xi = rng.standard_normal((n, p - 1))
    W = np.empty((n, p - 1))
    W[:, 0] = xi[:, 0]
    scale = np.sqrt(0.75)
    for j in range(1, p - 1):
        W[:, j] = 0.5 * W[:, j - 1] + scale * xi[:, j]

    X = np.empty((n, p))
    X[:, 0] = 1.0
    X[:, 1:] = W
    if design.noise == "heteroscedastic":
        X[:, 1] = np.abs(W[:, 0]) + 0.1
        X[:, 2] = W[:, 1] ** 2 + 0.5

    prop = expit(1.0 - X[:, 6] + X[:, 7])
    d = (rng.random(n) < prop).astype(np.int64)
    eps = rng.standard_normal(n)
    if design.noise == "heteroscedastic":
        sigma = np.where(d == 1, X[:, 2], X[:, 1])
    else:
        sigma = 1.0
    theta_obs = np.where(d[:, None] == 1, design.theta(1), design.theta(0))
    y = np.einsum("ij,ij->i", X, theta_obs) + eps * sigma
    return Dataset(y=y, d=d, x=X), design.true_alpha


def _sandwich(X_d, y_d, tau, support, z, settings):
    """Refit on `support` plus the large-sample variance of z'theta_hat.

    Variance: tau(1-tau) z_S' J^(-1) Sigma J^(-1) z_S / n_d with
    J = mean(f_i x_Si x_Si') (difference-quotient plug-in densities from
    support-restricted refits at tau +/- h) and Sigma = mean(x_Si x_Si').
    """
    support = np.asarray(support, dtype=np.intp)
    if support.size == 0:
        icol = _intercept_column(X_d)
        if icol is None:
            raise EstimationError("empty support with no intercept fallback")
        support = np.array([icol], dtype=np.intp)
    n_d = X_d.shape[0]
    fit = refit_qr(X_d, y_d, tau, support, settings=settings)
    h = bandwidth(tau, n_d)
    lo = refit_qr(X_d, y_d, tau - h, support, settings=settings)
    hi = refit_qr(X_d, y_d, tau + h, support, settings=settings)
    dens = densities_from_coefficients(X_d, lo.theta, hi.theta, h, tau=tau)
    Xs = X_d[:, support]
    J = (Xs * dens.values[:, None]).T @ Xs / n_d
    Sig = Xs.T @ Xs / n_d
    try:
        j_inv_z = np.linalg.solve(J, z[support])
    except np.linalg.LinAlgError as err:
        raise EstimationError(f"singular density-weighted Gram matrix: {err}")
    var = tau * (1.0 - tau) * float(j_inv_z @ Sig @ j_inv_z) / n_d
    return fit, var


def _lambda_levels(taus, n_total):
    levels = set()
    for t in taus:
        h = bandwidth(t, n_total)
        levels.update((float(t), float(t - h), float(t + h)))
    return sorted(levels)


def comparator_fit(dataset, z, tau, which, design=None, lam_by_arm=None,
                   level=0.95, seed=0, settings=None,
                   lambda_multiplier=0.2, lambda_level=0.9):
    """Standalone comparator estimate of alpha(tau; z) with its CI.

    which: 'oracle' (true support, needs `design`), 'refit' (pilot support,
    refitted coefficients), or 'lasso' (pilot coefficients as-is).  The CI
    treats the selected (or true) support as the correct model.
    """
    if which not in ("oracle", "refit", "lasso"):
        raise DataError(f"unknown comparator {which!r}")
    if which == "oracle" and design is None:
        raise DataError("the oracle comparator needs the simulation design")
    settings = settings or DEFAULT_SETTINGS
    z = np.asarray(z, dtype=np.float64)
    ss = np.random.SeedSequence(seed)
    rng1, rng0 = (np.random.default_rng(c) for c in ss.spawn(2))

    centers, variances = {}, {}
    for d, rng in ((1, rng1), (0, rng0)):
        X_d, y_d, _ = dataset.arm(d)
        if X_d.shape[0] == 0:
            raise DataError(f"treatment arm {d} is empty")
        if which == "oracle":
            support = design.true_support(d)
            fit, var = _sandwich(X_d, y_d, tau, support, z, settings)
            centers[d] = float(z @ fit.theta)
        else:
            if lam_by_arm is not None and d in lam_by_arm:
                lam = lam_by_arm[d]
            else:
                lam = select_lambda(X_d, _lambda_levels([tau], dataset.n),
                                    level=lambda_level,
                                    multiplier=lambda_multiplier, rng=rng)
            pw = penalty_loadings(X_d)
            pilot = solve_penalized_qr(
                X_d, y_d, tau, lam * np.sqrt(tau * (1.0 - tau)),
                penalty_weights=pw, settings=settings)
            fit, var = _sandwich(X_d, y_d, tau, pilot.support, z, settings)
            theta = pilot.theta if which == "lasso" else fit.theta
            centers[d] = float(z @ theta)
        variances[d] = var

    alpha = centers[1] - centers[0]
    half = norm.ppf(0.5 * (1.0 + level)) * np.sqrt(variances[1] + variances[0])
    return alpha, (alpha - half, alpha + half)


@dataclass(frozen=True)
class McMetrics:
    """Aggregated Monte Carlo metrics: one row per (estimator, tau)."""
    design: SimDesign
    tau_list: tuple
    n_reps: int
    estimators: tuple
    rows: tuple
    failures: dict
    samples: dict = None


def _replicate(design, taus, estimators, child, level, opts):
    """Run every requested estimator on one simulated dataset."""
    ss_data, ss_est = child.spawn(2)
    dataset, _ = generate_dataset(design, np.random.default_rng(ss_data))
    z = design.z()
    n_total = dataset.n
    settings = opts.settings or DEFAULT_SETTINGS
    sub = ss_est.spawn(5)
    rng_lam = {1: np.random.default_rng(sub[0]),
               0: np.random.default_rng(sub[1])}
    rng_cv = {1: np.random.default_rng(sub[2]),
              0: np.random.default_rng(sub[3])}
    h_per_tau = {float(t): bandwidth(t, n_total) for t in taus}

    records, errors = {}, {}
    arm_lam, pilot_cache, sandwich_cache = {}, {}, {}

    rank_names = [e for e in estimators if e in _RULE_OF]
    if rank_names:
        rules = tuple(dict.fromkeys(_RULE_OF[e] for e in rank_names))
        ropts = replace(opts, gamma_rule=rules[0], gamma_rules=rules)
        try:
            arm_recs = {}
            for d in (1, 0):
                X_d, y_d, idx = dataset.arm(d)
                if X_d.shape[0] == 0:
                    raise DataError(f"treatment arm {d} is empty")
                lam, recs = _estimate_arm(X_d, y_d, idx, n_total, z,
                                          np.asarray(taus), h_per_tau, ropts,
                                          rng_lam[d], rng_cv[d], d)
                arm_lam[d] = lam
                arm_recs[d] = recs
                for r in recs[rules[0]]:
                    pilot_cache[(d, float(r.tau))] = r.pilot
            for name in rank_names:
                rule = _RULE_OF[name]
                for j, t in enumerate(taus):
                    r1 = arm_recs[1][rule][j]
                    r0 = arm_recs[0][rule][j]
                    a = r1.cqf.q_hat - r0.cqf.q_hat
                    s2 = r1.variance + r0.variance
                    lo, hi = pointwise_ci(a, s2, n_total, level)
                    records[(name, float(t))] = {
                        "alpha": a, "sigma2": s2,
                        "ci_low": float(lo), "ci_high": float(hi)}
        except (ConvergenceError, DualUnboundedError, EstimationError,
                DataError) as err:
            for name in rank_names:
                errors[name] = f"{type(err).__name__}: {err}"

    comp_names = [e for e in estimators if e in ("oracle", "refit", "lasso")]
    if comp_names:
        def get_lam(d):
            if d not in arm_lam:
                X_d, _, _ = dataset.arm(d)
                if opts.lambda_override is not None:
                    arm_lam[d] = float(opts.lambda_override)
                else:
                    arm_lam[d] = select_lambda(
                        X_d, _lambda_levels(taus, n_total),
                        n_sim=opts.lambda_nsim, level=opts.lambda_level,
                        multiplier=opts.lambda_multiplier, rng=rng_lam[d])
            return arm_lam[d]

        def get_pilot(d, t):
            key = (d, t)
            if key not in pilot_cache:
                X_d, y_d, _ = dataset.arm(d)
                pw = penalty_loadings(X_d)
                pilot_cache[key] = solve_penalized_qr(
                    X_d, y_d, t, get_lam(d) * np.sqrt(t * (1.0 - t)),
                    penalty_weights=pw, settings=settings)
            return pilot_cache[key]

        def get_sandwich(d, t, support):
            key = (d, t, tuple(support))
            if key not in sandwich_cache:
                X_d, y_d, _ = dataset.arm(d)
                sandwich_cache[key] = _sandwich(X_d, y_d, t, support, z,
                                                settings)
            return sandwich_cache[key]

        zq = norm.ppf(0.5 * (1.0 + level))
        for name in comp_names:
            try:
                for t in (float(t) for t in taus):
                    centers, var_sum = {}, 0.0
                    for d in (1, 0):
                        if name == "oracle":
                            support = design.true_support(d)
                            fit, var = get_sandwich(d, t, support)
                            centers[d] = float(z @ fit.theta)
                        else:
                            pilot = get_pilot(d, t)
                            fit, var = get_sandwich(d, t, pilot.support)
                            theta = (pilot.theta if name == "lasso"
                                     else fit.theta)
                            centers[d] = float(z @ theta)
                        var_sum += var
                    a = centers[1] - centers[0]
                    half = zq * np.sqrt(var_sum)
                    records[(name, t)] = {
                        "alpha": a, "sigma2": var_sum * n_total,
                        "ci_low": a - half, "ci_high": a + half}
            except (ConvergenceError, DualUnboundedError, EstimationError,
                    DataError) as err:
                errors[name] = f"{type(err).__name__}: {err}"
                for t in (float(t) for t in taus):
                    records.pop((name, t), None)

    return records, errors


def _replicate_star(args):
    return _replicate(*args)


def run_monte_carlo(design, tau_list, n_reps, estimators=("rank_1se",
                    "rank_2se", "refit", "lasso"), n_workers=1, seed=None,
                    level=0.95, options=None, keep_samples=False):
    """Monte Carlo study of the requested estimators on one design.

    Per replication: simulate a dataset from an independent RNG substream,
    run every estimator at every tau, and record estimate and CI.
    Aggregates sqrt(n) x bias, n x variance, and coverage, each with its
    Monte Carlo standard error.  Replications where an estimator fails are
    excluded from that estimator's metrics and counted; more than 10%
    failures for any estimator raises an error.
    """
    if n_reps < 2:
        raise DataError("need at least 2 replications")
    estimators = tuple(estimators)
    for e in estimators:
        if e not in ESTIMATORS:
            raise DataError(f"unknown estimator {e!r}; choose from {ESTIMATORS}")
    if "oracle" in estimators and design.theta1_shape != "sparse":
        raise DataError("the oracle comparator needs the sparse theta1 design "
                        "(otherwise the true support is not small)")
    taus = tuple(float(t) for t in tau_list)
    if len(taus) == 0:
        raise DataError("tau_list is empty")
    opts = options or EstimateOptions(band=False)
    if seed is None:
        seed = design.seed
    children = np.random.SeedSequence(seed).spawn(n_reps)
    tasks = [(design, taus, estimators, child, level, opts)
             for child in children]

    if n_workers and n_workers > 1:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(_replicate_star, tasks,
                                    chunksize=max(1, n_reps // (4 * n_workers))))
    else:
        results = [_replicate(*task) for task in tasks]

    n = design.n
    rows = []
    failures = {}
    samples = {} if keep_samples else None
    for name in estimators:
        fail = sum(1 for _, errs in results if name in errs)
        failures[name] = fail
        if fail > 0.1 * n_reps:
            msgs = {errs[name] for _, errs in results if name in errs}
            raise EstimationError(
                f"estimator {name!r} failed in {fail}/{n_reps} replications: "
                f"{sorted(msgs)[0]}")
        for t in taus:
            entries = [recs[(name, t)] for recs, errs in results
                       if name not in errs]
            n_used = len(entries)
            if n_used < 2:
                raise EstimationError(
                    f"fewer than 2 usable replications for {name} at tau={t}")
            alphas = np.array([e["alpha"] for e in entries])
            lows = np.array([e["ci_low"] for e in entries])
            highs = np.array([e["ci_high"] for e in entries])
            truth = design.true_alpha(t)
            covered = (lows <= truth) & (truth <= highs)
            coverage = float(covered.mean())
            n_variance = n * float(np.var(alphas, ddof=1))
            rows.append({
                "estimator": name,
                "tau": t,
                "true_alpha": truth,
                "n_used": n_used,
                "sqrt_n_bias": float(np.sqrt(n) * (alphas.mean() - truth)),
                "sqrt_n_bias_se": float(np.sqrt(n) * alphas.std(ddof=1)
                                        / np.sqrt(n_used)),
                "n_variance": n_variance,
                "n_variance_se": n_variance * float(np.sqrt(2.0 / (n_used - 1))),
                "coverage": coverage,
                "coverage_se": float(np.sqrt(coverage * (1.0 - coverage)
                                             / n_used)),
            })
            if keep_samples:
                samples[(name, t)] = {
                    "alpha": alphas,
                    "sigma2": np.array([e["sigma2"] for e in entries]),
                    "ci_low": lows,
                    "ci_high": highs,
                }
    return McMetrics(design=design, tau_list=taus, n_reps=n_reps,
                     estimators=estimators, rows=tuple(rows),
                     failures=failures, samples=samples)
