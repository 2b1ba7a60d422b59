"""Debiased CQF and HQTE estimation with pointwise and uniform inference.

Assembles the full pipeline per treatment arm — penalty level, pilot
quantile regressions, plug-in densities, cross-validated gamma, dual
solution, debiasing weights, debiased CQF — and combines the arms into
the HQTE curve with variances, covariance matrices, pointwise intervals,
simulation-based uniform bands, and the integrated HQTE.
"""
import numpy as np
from dataclasses import dataclass
from scipy.stats import norm

from ._backend import backend_name
from .debias import (DebiasProblem, GammaCv, _quad_matrix,
                     cross_validate_gamma, default_gamma_grid,
                     recover_weights, solve_dual)
from .density import bandwidth, estimate_densities
from .exceptions import DataError, EstimationError
from .qr import (DEFAULT_SETTINGS, QrFit, penalty_loadings, rank_score,
                 select_lambda, solve_penalized_qr)

__all__ = [
    "CqfEstimate", "HqteResult", "EstimateOptions", "debiased_cqf", "hqte",
    "variance_primal", "variance_dual", "covariance_matrix", "pointwise_ci",
    "uniform_band", "integrated_hqte", "estimate_full",
]


@dataclass(frozen=True)
class CqfEstimate:
    """Debiased conditional quantile function value for one arm."""
    tau: float
    z: np.ndarray
    q_hat: float
    theta_pilot: QrFit
    weights: object
    dual: object
    group: int


@dataclass(frozen=True)
class TauRecord:
    """Everything the pipeline produced for one arm at one quantile."""
    tau: float
    pilot: QrFit
    density: object
    gamma: float
    cv: GammaCv
    dual: object
    weights: object
    cqf: CqfEstimate
    variance: float


@dataclass(frozen=True)
class ArmEstimate:
    group: int
    n_rows: int
    lam: float
    records: tuple


@dataclass(frozen=True)
class HqteResult:
    """HQTE curve estimate with variances and confidence sets."""
    tau_grid: np.ndarray
    alpha_hat: np.ndarray
    sigma2: np.ndarray
    ci_low: np.ndarray
    ci_high: np.ndarray
    H1: np.ndarray
    H0: np.ndarray
    level: float
    kappa: float = None
    band_low: np.ndarray = None
    band_high: np.ndarray = None
    integrated: dict = None
    arm1: ArmEstimate = None
    arm0: ArmEstimate = None
    diagnostics: dict = None


@dataclass(frozen=True)
class EstimateOptions:
    """Controls for estimate_full; defaults follow the procedure's rules."""
    level: float = 0.95
    folds: int = 10
    gamma_rule: str = "one_se"
    gamma_grid: np.ndarray = None
    gamma_override: float = None
    lambda_override: float = None
    lambda_multiplier: float = 0.2
    density_lambda_multiplier: float = 1.0
    lambda_level: float = 0.9
    lambda_nsim: int = 1000
    weighted_penalty: bool = True
    bandwidth_override: float = None
    band: bool = True
    band_draws: int = 100_000
    integrated: bool = False
    seed: int = 0
    keep_cv: bool = False
    settings: object = None
    # internal: fit several gamma rules off one CV run (must contain
    # gamma_rule); used by the simulation harness.
    gamma_rules: tuple = None


def debiased_cqf(z, pilot, weights, densities, responses, group_design, tau,
                 n_total, group=None, dual=None):
    """Debiased CQF value: z'theta + n^(-1/2) sum_i w_i f_i^(-1) psi_i with
    psi_i = tau - 1{y_i <= x_i'theta} the rank scores at the pilot fit."""
    z = np.asarray(z, dtype=np.float64)
    f = np.asarray(densities, dtype=np.float64)
    w = weights.w
    if w.shape != f.shape or f.shape[0] != group_design.shape[0]:
        raise DataError("weights, densities, and group rows must align")
    resid = responses - group_design @ pilot.theta
    psi = rank_score(resid, tau)
    correction = float(np.sum(w * psi / f)) / np.sqrt(float(n_total))
    q_hat = float(z @ pilot.theta) + correction
    return CqfEstimate(tau=float(tau), z=z, q_hat=q_hat, theta_pilot=pilot,
                       weights=weights, dual=dual,
                       group=group if group is not None else -1)


def hqte(cqf1, cqf0):
    """alpha(tau; z) = Q1(tau; z) - Q0(tau; z)."""
    if cqf1.tau != cqf0.tau:
        raise DataError("CQF estimates are at different quantile levels")
    if not np.array_equal(cqf1.z, cqf0.z):
        raise DataError("CQF estimates target different z vectors")
    return cqf1.q_hat - cqf0.q_hat


def variance_primal(weights, densities, tau):
    """Per-arm piece of sigma_2^2: tau(1-tau) sum_i w_i^2 / f_i^2."""
    f = np.asarray(densities, dtype=np.float64)
    w = weights.w if hasattr(weights, "w") else np.asarray(weights, float)
    tau = float(tau)
    return (tau - tau * tau) * float(np.sum((w / f) ** 2))


def _dual_projection(v, densities, group_design):
    return np.ascontiguousarray(densities * (group_design @ v))


def variance_dual(dual, densities, group_design, tau, n_total):
    """Per-arm piece of sigma_1^2: tau(1-tau)/(4n) sum_i f_i^2 (x_i'v)^2."""
    a = _dual_projection(dual.v, densities, group_design)
    tau = float(tau)
    return (tau - tau * tau) * float(np.dot(a, a)) / (4.0 * float(n_total))


def covariance_matrix(duals, density_slices, group_design, tau_grid, n_total):
    """H(t_j, t_k) = (t_j ^ t_k - t_j t_k) v_j' [ (1/4n) sum f_i(t_j) f_i(t_k)
    x_i x_i' ] v_k, evaluated through the per-row projections
    a_i(t) = f_i(t) x_i'v(t) so the diagonal reproduces variance_dual."""
    taus = np.asarray(tau_grid, dtype=np.float64)
    m = taus.size
    if len(duals) != m or len(density_slices) != m:
        raise DataError("need one dual solution and density slice per grid point")
    proj = []
    for j in range(m):
        values = getattr(density_slices[j], "values", density_slices[j])
        proj.append(_dual_projection(duals[j].v, values, group_design))
    H = np.empty((m, m))
    four_n = 4.0 * float(n_total)
    for j in range(m):
        for k in range(j, m):
            scale = min(taus[j], taus[k]) - taus[j] * taus[k]
            H[j, k] = H[k, j] = scale * float(np.dot(proj[j], proj[k])) / four_n
    return H


def pointwise_ci(alpha_hat, sigma2_total, n_total, level=0.95):
    """alpha_hat +/- z_level sqrt(sigma2_total / n)."""
    if not 0.0 < level < 1.0:
        raise DataError(f"level must lie in (0, 1), got {level}")
    sigma2 = np.asarray(sigma2_total, dtype=np.float64)
    if np.any(sigma2 < 0.0):
        raise DataError("variance must be nonnegative")
    zq = norm.ppf(0.5 * (1.0 + level))
    half = zq * np.sqrt(sigma2 / float(n_total))
    alpha_hat = np.asarray(alpha_hat, dtype=np.float64)
    return alpha_hat - half, alpha_hat + half


def _chol_with_jitter(M):
    m = M.shape[0]
    base = float(np.trace(M)) / m
    try:
        return np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        pass
    eps = 1e-10 * base
    while eps <= 1e-4 * base:
        try:
            return np.linalg.cholesky(M + eps * np.eye(m))
        except np.linalg.LinAlgError:
            eps *= 10.0
    raise EstimationError("covariance factorization failed even with jitter")


def _standardized_band_inputs(H1, H0, sigma2_per_tau):
    sigma2 = np.asarray(sigma2_per_tau, dtype=np.float64)
    if np.any(sigma2 <= 0.0):
        raise DataError("uniform band needs strictly positive variances")
    sigma = np.sqrt(sigma2)
    M = (np.asarray(H1, float) + np.asarray(H0, float)) / np.outer(sigma, sigma)
    return sigma, M


def _standardized_draws(M, n_draws, rng):
    L = _chol_with_jitter(M)
    Z = rng.standard_normal((int(n_draws), M.shape[0]))
    return Z @ L.T


def _trapezoid_weights(taus):
    m = taus.size
    w = np.zeros(m)
    d = np.diff(taus)
    w[:-1] += d / 2.0
    w[1:] += d / 2.0
    return w


def uniform_band(H1, H0, sigma2_per_tau, alpha_hat_per_tau, n_total,
                 level=0.95, n_draws=100_000, seed=None, rng=None):
    """Simulation-based uniform confidence band for the HQTE curve.

    Standardizes the combined covariance to unit diagonal, simulates the
    sup of the absolute Gaussian limit process over the grid, and returns
    (kappa, (band_low, band_high)) with band alpha +/- kappa sigma/sqrt(n).
    """
    sigma, M = _standardized_band_inputs(H1, H0, sigma2_per_tau)
    if rng is None:
        rng = np.random.default_rng(seed)
    R = _standardized_draws(M, n_draws, rng)
    kappa = float(np.quantile(np.abs(R).max(axis=1), level))
    alpha = np.asarray(alpha_hat_per_tau, dtype=np.float64)
    half = kappa * sigma / np.sqrt(float(n_total))
    return kappa, (alpha - half, alpha + half)


def integrated_hqte(alpha_hat_per_tau, H1, H0, tau_grid, n_total, level=0.95,
                    n_draws=100_000, seed=None, rng=None):
    """Trapezoidal integral of the HQTE curve with a simulation-based CI.

    The CI simulates the integral of the Gaussian limit process as the
    trapezoid-weighted sum of the same standardized draws the uniform
    band uses (identical seed => identical draws).
    """
    taus = np.asarray(tau_grid, dtype=np.float64)
    if taus.size < 2:
        raise DataError("integrated HQTE needs at least 2 grid points")
    alpha = np.asarray(alpha_hat_per_tau, dtype=np.float64)
    sigma, M = _standardized_band_inputs(H1, H0, np.diag(np.asarray(H1) +
                                                         np.asarray(H0)))
    if rng is None:
        rng = np.random.default_rng(seed)
    R = _standardized_draws(M, n_draws, rng)
    w = _trapezoid_weights(taus)
    estimate = float(w @ alpha)
    V = (R * sigma) @ w
    half = float(np.quantile(np.abs(V), level)) / np.sqrt(float(n_total))
    return estimate, (estimate - half, estimate + half)


def _estimate_arm(X_d, y_d, idx, n_total, z, taus, h_per_tau, opts,
                  rng_lambda, rng_cv, group):
    settings = opts.settings or DEFAULT_SETTINGS
    pw = penalty_loadings(X_d) if opts.weighted_penalty else None

    if opts.lambda_override is not None:
        lam = lam_density = float(opts.lambda_override)
    else:
        levels = set()
        for t in taus:
            h = h_per_tau[t]
            levels.update((t, t - h, t + h))
        lam_base = select_lambda(X_d, sorted(levels), n_sim=opts.lambda_nsim,
                                 level=opts.lambda_level,
                                 multiplier=1.0, rng=rng_lambda)
        lam = opts.lambda_multiplier * lam_base
        lam_density = opts.density_lambda_multiplier * lam_base

    def lam_at(level):
        return lam * np.sqrt(level * (1.0 - level))

    # The density pilots get their own penalty multiplier.  The difference
    # quotient divides by a fitted-value difference of order 2h, so support
    # noise that is harmless in the debiased point estimate (where the
    # correction absorbs it) turns into heavy-tailed density errors.  A more
    # aggressive selection keeps the +/-h refits small and their difference
    # stable.
    def lam_density_at(level):
        return lam_density * np.sqrt(level * (1.0 - level))

    gamma_grid = opts.gamma_grid
    if gamma_grid is None and opts.gamma_override is None:
        gamma_grid = default_gamma_grid(z, n_total)
    rules = opts.gamma_rules or (opts.gamma_rule,)

    records = {rule: [] for rule in rules}
    dcache = {}
    theta_warm = None
    v_warm = dict.fromkeys(rules)
    for t in taus:
        pilot = solve_penalized_qr(X_d, y_d, t, lam_at(t), penalty_weights=pw,
                                   settings=settings, theta0=theta_warm)
        theta_warm = pilot.theta
        dens = estimate_densities(X_d, y_d, t, lam_density_at,
                                  penalty_weights=pw, settings=settings,
                                  h=h_per_tau[t], cache=dcache)
        if opts.gamma_override is not None:
            cv = None
            gamma_of = dict.fromkeys(rules, float(opts.gamma_override))
        else:
            cv = cross_validate_gamma(X_d, dens.values, z, n_total,
                                      folds=opts.folds, grid=gamma_grid,
                                      rng=rng_cv, settings=settings)
            gamma_of = {rule: cv.by_rule(rule) for rule in rules}
        quad = _quad_matrix(X_d, dens.values, n_total)
        solved = {}
        for rule in rules:
            gamma = gamma_of[rule]
            problem = DebiasProblem(group_design=X_d, densities=dens.values,
                                    z=z, gamma=gamma, n_total=n_total)
            if gamma in solved:
                dual = solved[gamma]
            else:
                dual = solve_dual(problem, settings=settings,
                                  v0=v_warm[rule], quad=quad)
                solved[gamma] = dual
            v_warm[rule] = dual.v
            weights = recover_weights(dual, problem, indices=idx)
            cqf = debiased_cqf(z, pilot, weights, dens.values, y_d, X_d, t,
                               n_total, group=group, dual=dual)
            var = variance_primal(weights, dens.values, t)
            records[rule].append(TauRecord(
                tau=t, pilot=pilot, density=dens, gamma=gamma,
                cv=cv if opts.keep_cv else None, dual=dual, weights=weights,
                cqf=cqf, variance=var))
    return lam, records


def _arm_diagnostics(arm):
    taus = []
    for rec in arm.records:
        taus.append({
            "tau": rec.tau,
            "gamma": rec.gamma,
            "pilot_iterations": rec.pilot.iterations,
            "pilot_support_size": int(rec.pilot.support.size),
            "dual_iterations": rec.dual.iterations,
            "dual_support_size": int(np.count_nonzero(rec.dual.v)),
            "n_floored_densities": rec.density.n_floored,
            "n_capped_densities": rec.density.n_capped,
            "bandwidth": rec.density.h,
        })
    return {"n_rows": arm.n_rows, "lambda": arm.lam, "taus": taus}


def estimate_full(dataset, z, tau_grid, options=None):
    """Run the full rank-score debiasing procedure on a dataset.

    Per arm: penalty level, pilot fits across the grid, difference-quotient
    densities, cross-validated gamma, dual solve, weight recovery, debiased
    CQF.  The arms are then combined into the HQTE curve with pointwise
    intervals and, when requested, the uniform band and integrated curve.
    """
    opts = options or EstimateOptions()
    taus = np.unique(np.asarray(tau_grid, dtype=np.float64))
    if taus.size == 0:
        raise DataError("tau grid is empty")
    for t in taus:
        if not 0.0 < t < 1.0:
            raise DataError(f"tau must lie in (0, 1), got {t}")
    z = np.ascontiguousarray(z, dtype=np.float64)
    if z.shape != (dataset.p,):
        raise DataError(f"z must have length p={dataset.p}, got {z.shape}")
    if not np.isfinite(z).all():
        raise DataError("z contains NaN or Inf")

    n_total = dataset.n
    h_per_tau = {}
    for t in taus:
        h = (opts.bandwidth_override if opts.bandwidth_override
             else bandwidth(t, n_total))
        if not (0.0 < t - h and t + h < 1.0):
            raise DataError(f"tau +/- h leaves (0, 1): tau={t}, h={h}")
        h_per_tau[t] = h

    if opts.gamma_rules is not None and opts.gamma_rule not in opts.gamma_rules:
        raise DataError("gamma_rule must be among gamma_rules")
    ss = (opts.seed if isinstance(opts.seed, np.random.SeedSequence)
          else np.random.SeedSequence(opts.seed))
    rng_lam1, rng_lam0, rng_cv1, rng_cv0, rng_band = (
        np.random.default_rng(c) for c in ss.spawn(5))

    arms = {}
    for d, rng_lam, rng_cv in ((1, rng_lam1, rng_cv1), (0, rng_lam0, rng_cv0)):
        X_d, y_d, idx = dataset.arm(d)
        if X_d.shape[0] == 0:
            raise DataError(f"treatment arm {d} is empty")
        try:
            lam, records = _estimate_arm(X_d, y_d, idx, n_total, z, taus,
                                         h_per_tau, opts, rng_lam, rng_cv, d)
        except (DataError, EstimationError):
            raise
        except Exception as err:
            raise EstimationError(f"estimation failed in arm {d}: {err}") from err
        arms[d] = ArmEstimate(group=d, n_rows=X_d.shape[0], lam=lam,
                              records=tuple(records[opts.gamma_rule]))

    alpha = np.array([hqte(r1.cqf, r0.cqf) for r1, r0 in
                      zip(arms[1].records, arms[0].records)])
    sigma2 = np.array([r1.variance + r0.variance for r1, r0 in
                       zip(arms[1].records, arms[0].records)])
    ci_low, ci_high = pointwise_ci(alpha, sigma2, n_total, opts.level)

    H = {}
    for d in (1, 0):
        X_d, _, _ = dataset.arm(d)
        recs = arms[d].records
        H[d] = covariance_matrix([r.dual for r in recs],
                                 [r.density for r in recs],
                                 X_d, taus, n_total)

    kappa = band_low = band_high = None
    integrated = None
    if opts.band or opts.integrated:
        R = _standardized_draws(_standardized_band_inputs(H[1], H[0], sigma2)[1],
                                opts.band_draws, rng_band)
        sigma = np.sqrt(sigma2)
        if opts.band:
            kappa = float(np.quantile(np.abs(R).max(axis=1), opts.level))
            half = kappa * sigma / np.sqrt(float(n_total))
            band_low, band_high = alpha - half, alpha + half
        if opts.integrated:
            if taus.size < 2:
                raise DataError("integrated HQTE needs at least 2 grid points")
            w = _trapezoid_weights(taus)
            est = float(w @ alpha)
            V = (R * sigma) @ w
            ihalf = float(np.quantile(np.abs(V), opts.level))
            ihalf /= np.sqrt(float(n_total))
            integrated = {"estimate": est, "ci_low": est - ihalf,
                          "ci_high": est + ihalf}

    diagnostics = {
        "backend": backend_name(),
        "n": n_total,
        "p": dataset.p,
        "level": opts.level,
        "gamma_rule": opts.gamma_rule,
        "arm1": _arm_diagnostics(arms[1]),
        "arm0": _arm_diagnostics(arms[0]),
    }
    return HqteResult(tau_grid=taus, alpha_hat=alpha, sigma2=sigma2,
                      ci_low=ci_low, ci_high=ci_high, H1=H[1], H0=H[0],
                      level=opts.level, kappa=kappa, band_low=band_low,
                      band_high=band_high, integrated=integrated,
                      arm1=arms[1], arm0=arms[0], diagnostics=diagnostics)
