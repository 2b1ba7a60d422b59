"""Pure numpy implementation of the ADMM inner loops.

This is the fallback backend; `rankscore._kernels` (Cython) implements
the same two entry points with identical semantics.  State vectors are
updated in place so callers can warm-start consecutive solves.

Conventions shared by both backends:
  * all arrays are float64, C-contiguous;
  * `converged` / `unbounded` flags are returned as ints (0/1);
  * the augmented-Lagrangian penalty `rho` is adapted by residual
    balancing (multiply/divide by `adapt_factor` when one residual
    exceeds `adapt_ratio` times the other) and the final value is
    returned so warm restarts can resume from it.
"""
import numpy as np
from scipy.linalg import cho_factor, cho_solve

BACKEND_NAME = "python"


def _soft(x, thr):
    return np.sign(x) * np.maximum(np.abs(x) - thr, 0.0)


def _check_prox(x, tau, sigma):
    # argmin_z  rho_tau(z) + (z - x)^2 / (2 sigma), elementwise
    out = np.zeros_like(x)
    hi = x > sigma * tau
    lo = x < -sigma * (1.0 - tau)
    out[hi] = x[hi] - sigma * tau
    out[lo] = x[lo] + sigma * (1.0 - tau)
    return out


def penalized_qr_admm(X, y, chol_l, thr, tau, rho, tol, max_iter,
                      adapt_factor, adapt_ratio, theta, r, s, u1, u2):
    """ADMM for  min_theta  sum_i rho_tau(y_i - x_i'theta) + sum_k thr_k |theta_k|.

    Splitting: residual block r = y - X theta (check-loss prox) and
    coefficient block s = theta (soft threshold).  The theta update
    solves (X'X + I) theta = rhs through the Cholesky factor `chol_l`
    of X'X + I, which is independent of rho and therefore reused across
    penalty adaptations.

    Arguments
    ---------
    X : (n, p) design; y : (n,) response; chol_l : (p, p) lower Cholesky
    factor of X'X + I; thr : (p,) per-coordinate l1 weights (lambda * w_k);
    theta, r, s, u1, u2 : state vectors, modified in place.

    Returns (iterations, primal_residual, dual_residual, converged, rho).
    """
    n, p = X.shape
    norm_y = np.linalg.norm(y)
    factor = (chol_l, True)
    pri = dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        rhs = X.T @ (y - r - u1) + (s - u2)
        theta[:] = cho_solve(factor, rhs, check_finite=False)
        x_theta = X @ theta

        r_old = r.copy()
        r[:] = _check_prox(y - x_theta - u1, tau, 1.0 / rho)
        s_old = s.copy()
        s[:] = _soft(theta + u2, thr / rho)

        pr1 = x_theta + r - y
        pr2 = theta - s
        u1 += pr1
        u2 += pr2

        pri = np.sqrt(np.dot(pr1, pr1) + np.dot(pr2, pr2))
        dvec = X.T @ (r - r_old) - (s - s_old)
        dual = rho * np.linalg.norm(dvec)

        scale_ax = np.sqrt(np.dot(x_theta, x_theta) + np.dot(theta, theta))
        scale_bz = np.sqrt(np.dot(r, r) + np.dot(s, s))
        eps_pri = tol * (1.0 + max(scale_ax, scale_bz, norm_y))
        eps_dual = tol * (1.0 + rho * np.linalg.norm(X.T @ u1 + u2))
        if pri <= eps_pri and dual <= eps_dual:
            return it, pri, dual, 1, rho

        if pri > adapt_ratio * dual:
            rho *= adapt_factor
            u1 /= adapt_factor
            u2 /= adapt_factor
        elif dual > adapt_ratio * pri:
            rho /= adapt_factor
            u1 *= adapt_factor
            u2 *= adapt_factor
    return it, pri, dual, 0, rho


def l1_quad_admm(A, lin, l1w, rho, tol, max_iter, adapt_factor, adapt_ratio,
                 obj_floor, v, u, w):
    """ADMM for  min_v  0.5 v'Av + lin'v + l1w * ||v||_1  (A symmetric PSD).

    Splitting v = u with a quadratic v block, (A + rho I) v = rhs, and a
    soft-threshold u block.  Refactors A + rho I whenever rho adapts.
    Divergence of the objective below `obj_floor` flags the problem as
    unbounded (the l1 weight is too small to control the null space of A).

    Returns (iterations, primal_residual, dual_residual, converged, rho,
    unbounded).
    """
    p = A.shape[0]
    eye = np.eye(p)
    factor = cho_factor(A + rho * eye, lower=True, check_finite=False)
    pri = dual = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        v[:] = cho_solve(factor, rho * (u - w) - lin, check_finite=False)
        u_old = u.copy()
        u[:] = _soft(v + w, l1w / rho)
        w += v - u

        pri = np.linalg.norm(v - u)
        dual = rho * np.linalg.norm(u - u_old)
        eps_pri = tol * (1.0 + max(np.linalg.norm(v), np.linalg.norm(u)))
        eps_dual = tol * (1.0 + rho * np.linalg.norm(w))
        if pri <= eps_pri and dual <= eps_dual:
            return it, pri, dual, 1, rho, 0

        if it % 25 == 0:
            obj = 0.5 * v @ (A @ v) + lin @ v + l1w * np.abs(v).sum()
            if obj < obj_floor:
                return it, pri, dual, 0, rho, 1

        if pri > adapt_ratio * dual:
            rho *= adapt_factor
            w /= adapt_factor
            factor = cho_factor(A + rho * eye, lower=True, check_finite=False)
        elif dual > adapt_ratio * pri:
            rho /= adapt_factor
            w *= adapt_factor
            factor = cho_factor(A + rho * eye, lower=True, check_finite=False)
    return it, pri, dual, 0, rho, 0
