"""The rank-score debiasing program.

Primal: choose weights w over the rows of one treatment group minimizing
sum_i w_i^2 / f_i^2 subject to the covariate-matching box constraint
||z - n^(-1/2) sum_i w_i x_i||_inf <= gamma / n.  Production always solves
the equivalent l1-penalized quadratic dual

    min_v  (1/4n) sum_i f_i^2 (x_i'v)^2 + z'v + (gamma/n) ||v||_1

by ADMM and recovers w_i = -(f_i^2 / (2 sqrt(n))) x_i'v; the direct primal
solver is a desk-scale oracle.  gamma is tuned by K-fold cross-validation
on the dual with the 1SE / 2SE / min rules.
"""
import numpy as np
from dataclasses import dataclass, field

from . import _backend
from .exceptions import (ConvergenceError, DataError, DualUnboundedError,
                         EstimationError)
from .qr import DEFAULT_SETTINGS, SolverSettings

__all__ = [
    "DebiasProblem", "DualSolution", "DebiasWeights", "solve_dual",
    "recover_weights", "solve_primal_oracle", "default_gamma_grid",
    "GammaCv", "cross_validate_gamma", "select_gamma",
]


@dataclass(frozen=True)
class DebiasProblem:
    """Data of the debiasing program for one treatment group.

    group_design holds the rows with D = d; n_total is the full sample
    size n used in the program's normalization (not the group size).
    """
    group_design: np.ndarray
    densities: np.ndarray
    z: np.ndarray
    gamma: float
    n_total: int

    def __post_init__(self):
        X = np.ascontiguousarray(self.group_design, dtype=np.float64)
        f = np.ascontiguousarray(self.densities, dtype=np.float64)
        z = np.ascontiguousarray(self.z, dtype=np.float64)
        object.__setattr__(self, "group_design", X)
        object.__setattr__(self, "densities", f)
        object.__setattr__(self, "z", z)
        n_d, p = X.shape
        if f.shape != (n_d,):
            raise DataError("densities must have one entry per group row")
        if np.any(f <= 0.0):
            raise DataError("densities must be strictly positive")
        if z.shape != (p,):
            raise DataError("z must have one entry per design column")
        if self.gamma <= 0.0:
            raise DataError(f"gamma must be positive, got {self.gamma}")
        if self.n_total < n_d:
            raise DataError("n_total cannot be smaller than the group size")


@dataclass(frozen=True)
class DualSolution:
    v: np.ndarray
    objective: float
    gamma: float
    iterations: int
    primal_residual: float
    dual_residual: float
    converged: bool


@dataclass(frozen=True)
class DebiasWeights:
    """Debiasing weights over the rows of one group.

    `indices` (optional) are the positions of the group rows in the full
    sample; `full_vector` scatters the weights into a length-n vector that
    is zero off the group.
    """
    w: np.ndarray
    source: str
    indices: np.ndarray = None

    def full_vector(self, n_total):
        if self.indices is None:
            raise DataError("weights carry no full-sample indices")
        out = np.zeros(int(n_total))
        out[self.indices] = self.w
        return out


def _quad_matrix(X, f, n_total):
    """A = (1/2n) sum_i f_i^2 x_i x_i', assembled as a scaled cross product."""
    Xf = X * f[:, None]
    return (Xf.T @ Xf) / (2.0 * n_total)


def dual_objective(problem, v):
    """(1/4n) sum f^2 (x'v)^2 + z'v + (gamma/n) ||v||_1 at v."""
    X, f = problem.group_design, problem.densities
    n = float(problem.n_total)
    xv = X @ v
    quad = float(np.sum((f * xv) ** 2)) / (4.0 * n)
    return quad + float(problem.z @ v) + problem.gamma / n * float(np.abs(v).sum())


def solve_dual(problem, settings=None, v0=None, quad=None):
    """Solve the dual program by ADMM.

    Returns the sparse iterate as v (exact zeros from the soft-threshold
    block).  Raises ConvergenceError on iteration-limit hits and
    DualUnboundedError when the objective dives below a floor, which
    signals gamma too small for the group design.

    `quad` optionally supplies the precomputed matrix
    (1/2n) sum f_i^2 x_i x_i' so repeated solves on the same data (e.g.
    a gamma path) skip its assembly.
    """
    settings = settings or DEFAULT_SETTINGS
    X, f, z = problem.group_design, problem.densities, problem.z
    n = float(problem.n_total)
    p = X.shape[1]
    l1w = problem.gamma / n

    z_max = float(np.max(np.abs(z))) if z.size else 0.0
    if l1w >= z_max:
        # zero is optimal: the subgradient condition ||z||_inf <= gamma/n
        # holds with v = 0.
        v = np.zeros(p)
        return DualSolution(v=v, objective=0.0, gamma=problem.gamma,
                            iterations=0, primal_residual=0.0,
                            dual_residual=0.0, converged=True)

    A = _quad_matrix(X, f, n) if quad is None else quad
    lin = np.ascontiguousarray(z)
    obj_floor = -1e12 * max(1.0, n * float(z @ z))

    if v0 is None:
        v = np.zeros(p)
    else:
        v = np.ascontiguousarray(v0, dtype=np.float64).copy()
    u = v.copy()
    w = np.zeros(p)

    it, pri, dual, conv, _rho, unbounded = _backend.l1_quad_admm(
        A, lin, l1w, settings.rho, settings.tol, settings.max_iter,
        settings.adapt_factor, settings.adapt_ratio, obj_floor, v, u, w)
    if unbounded:
        raise DualUnboundedError(
            f"dual objective fell below {obj_floor:.3e}; gamma="
            f"{problem.gamma:.6g} is too small for this group design")
    if not conv:
        raise ConvergenceError(
            f"dual ADMM did not converge in {it} iterations "
            f"(primal {pri:.3e}, dual {dual:.3e})",
            iterations=it, primal_residual=pri, dual_residual=dual)

    v_hat = u.copy()
    obj = dual_objective(problem, v_hat)
    return DualSolution(v=v_hat, objective=obj, gamma=problem.gamma,
                        iterations=it, primal_residual=float(pri),
                        dual_residual=float(dual), converged=True)


def recover_weights(dual, problem, indices=None):
    """w_i = -(f_i^2 / (2 sqrt(n))) x_i' v from the dual solution."""
    if not dual.converged:
        raise EstimationError("cannot recover weights from an unconverged dual")
    X, f = problem.group_design, problem.densities
    n = float(problem.n_total)
    w = -(f * f) * (X @ dual.v) / (2.0 * np.sqrt(n))
    idx = None if indices is None else np.asarray(indices, dtype=np.intp)
    return DebiasWeights(w=w, source="dual_recovered", indices=idx)


def primal_objective(problem, w):
    return float(np.sum((w / problem.densities) ** 2))


def primal_gap(problem, w):
    """||z - n^(-1/2) sum_i w_i x_i||_inf, the box-constraint activity."""
    n = float(problem.n_total)
    resid = problem.z - problem.group_design.T @ w / np.sqrt(n)
    return float(np.max(np.abs(resid))) if resid.size else 0.0


def solve_primal_oracle(problem, solver=None, indices=None):
    """Directly solve the primal program with a generic convex solver.

    Desk-scale test oracle, not the production path.  Requires cvxpy.
    """
    import cvxpy as cp

    X, f, z = problem.group_design, problem.densities, problem.z
    n = float(problem.n_total)
    n_d = X.shape[0]
    w = cp.Variable(n_d)
    objective = cp.Minimize(cp.sum_squares(cp.multiply(w, 1.0 / f)))
    box = cp.norm_inf(z - (X.T @ w) / np.sqrt(n)) <= problem.gamma / n
    prob = cp.Problem(objective, [box])
    solvers = [solver] if solver else ["CLARABEL", "ECOS", "OSQP", "SCS"]
    last_err = None
    for name in solvers:
        if name not in cp.installed_solvers():
            continue
        try:
            prob.solve(solver=name)
        except cp.error.SolverError as err:  # pragma: no cover
            last_err = err
            continue
        if prob.status in ("optimal", "optimal_inaccurate"):
            idx = None if indices is None else np.asarray(indices, dtype=np.intp)
            return DebiasWeights(w=np.asarray(w.value, dtype=np.float64),
                                 source="primal_direct", indices=idx)
        if prob.status in ("infeasible", "infeasible_inaccurate"):
            raise DualUnboundedError(
                f"primal box constraint infeasible at gamma={problem.gamma:.6g}")
    raise EstimationError(f"no convex solver produced a solution "
                          f"(last status {prob.status!r})") from last_err


def default_gamma_grid(z, n_total, size=50, span=1e4):
    """Log-spaced grid from gamma_max = n ||z||_inf down by `span`, ascending.

    gamma_max is the smallest gamma with v = 0, so the grid brackets every
    useful amount of regularization.
    """
    z = np.asarray(z, dtype=np.float64)
    gmax = float(n_total) * float(np.max(np.abs(z)))
    if gmax <= 0.0:
        raise DataError("z is identically zero; nothing to debias")
    return np.geomspace(gmax / span, gmax, int(size))


@dataclass(frozen=True)
class GammaCv:
    """Cross-validation curves and the selections they imply."""
    grid: np.ndarray
    mean_risk: np.ndarray
    se_risk: np.ndarray
    gamma_min: float
    gamma_one_se: float
    gamma_two_se: float
    folds: int
    n_failed: int

    def by_rule(self, rule):
        try:
            return {"min": self.gamma_min, "one_se": self.gamma_one_se,
                    "two_se": self.gamma_two_se}[rule]
        except KeyError:
            raise DataError(f"unknown gamma rule {rule!r}") from None


def cross_validate_gamma(group_design, densities, z, n_total, folds=10,
                         grid=None, seed=None, rng=None, settings=None):
    """K-fold cross-validation of gamma on the dual program.

    For each gamma and fold the dual is fit on the training rows with the
    normalization constant rescaled proportionally, and the held-out risk
    (1/4 n_test) sum_test f_i^2 (x_i'v)^2 + z'v  (penalty excluded)
    is recorded.  Risk curves are averaged across folds; the 1SE/2SE rules
    return the smallest gamma whose mean risk is within one/two standard
    deviations (of the fold risks at the minimizer) of the minimum.
    """
    X = np.ascontiguousarray(group_design, dtype=np.float64)
    f = np.ascontiguousarray(densities, dtype=np.float64)
    z = np.ascontiguousarray(z, dtype=np.float64)
    n_d = X.shape[0]
    if folds < 2:
        raise DataError(f"need at least 2 folds, got {folds}")
    if n_d < folds:
        raise DataError(f"group size {n_d} is smaller than fold count {folds}")
    if grid is None:
        grid = default_gamma_grid(z, n_total)
    grid = np.sort(np.asarray(grid, dtype=np.float64))
    settings = settings or DEFAULT_SETTINGS

    if rng is None:
        rng = np.random.default_rng(seed)
    perm = rng.permutation(n_d)
    fold_ids = np.array_split(perm, folds)

    risks = np.full((grid.size, folds), np.inf)
    n_failed = 0
    for k, test_idx in enumerate(fold_ids):
        train_mask = np.ones(n_d, dtype=bool)
        train_mask[test_idx] = False
        X_tr, f_tr = X[train_mask], f[train_mask]
        X_te, f_te = X[test_idx], f[test_idx]
        n_tr = X_tr.shape[0]
        n_train_total = n_total * n_tr / n_d
        n_test_total = n_total * test_idx.size / n_d
        quad_tr = _quad_matrix(X_tr, f_tr, n_train_total)
        v_warm = np.zeros(X.shape[1])
        # descend the grid so each solve warm-starts from the previous one
        for g in range(grid.size - 1, -1, -1):
            prob = DebiasProblem(group_design=X_tr, densities=f_tr, z=z,
                                 gamma=float(grid[g]),
                                 n_total=n_train_total)
            try:
                sol = solve_dual(prob, settings=settings, v0=v_warm,
                                 quad=quad_tr)
            except (ConvergenceError, DualUnboundedError):
                n_failed += 1
                continue
            v_warm = sol.v
            xv = X_te @ sol.v
            quad = float(np.sum((f_te * xv) ** 2)) / (4.0 * n_test_total)
            risks[g, k] = quad + float(z @ sol.v)

    mean_risk = risks.mean(axis=1)
    if not np.isfinite(mean_risk).any():
        raise EstimationError("every cross-validation fit failed")
    # Band width follows the fold-risk standard deviation, not the standard
    # error of the mean: with K folds the sd/sqrt(K) band is so narrow that
    # the rule barely moves off the risk minimizer, which defeats its purpose
    # of trading a little held-out risk for substantially less shrinkage.
    with np.errstate(invalid="ignore"):
        se_risk = np.where(np.isfinite(mean_risk),
                           np.std(risks, axis=1, ddof=1),
                           np.inf)
    gstar = int(np.nanargmin(np.where(np.isfinite(mean_risk), mean_risk, np.nan)))
    se = float(se_risk[gstar])

    def smallest_within(k_se):
        cutoff = mean_risk[gstar] + k_se * se
        ok = np.flatnonzero(mean_risk <= cutoff)
        return float(grid[ok[0]])

    return GammaCv(grid=grid, mean_risk=mean_risk, se_risk=se_risk,
                   gamma_min=float(grid[gstar]),
                   gamma_one_se=smallest_within(1.0),
                   gamma_two_se=smallest_within(2.0),
                   folds=folds, n_failed=n_failed)


def select_gamma(group_design, densities, z, n_total, folds=10, grid=None,
                 rule="one_se", seed=None, rng=None, settings=None):
    """Cross-validated gamma under the given rule ('one_se', 'two_se', 'min')."""
    if grid is not None and len(grid) == 1:
        return float(grid[0])
    cv = cross_validate_gamma(group_design, densities, z, n_total,
                              folds=folds, grid=grid, seed=seed, rng=rng,
                              settings=settings)
    return cv.by_rule(rule)
