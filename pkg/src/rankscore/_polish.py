"""Active-set polish for ADMM iterates of the penalized quantile program.

The ADMM solver drives its iterate into the neighbourhood of a vertex of

    min_theta  sum_i rho_tau(y_i - x_i' theta) + sum_k lamw_k |theta_k|,

but the last digits of accuracy are expensive for a first-order method.  This
module finishes the job combinatorially: it reads a candidate support and a
candidate interpolation set (rows with exactly zero residual) off the ADMM
iterate, solves the square system that a vertex must satisfy, and then checks
the full KKT conditions via an explicitly constructed dual certificate.  When
a condition fails, the basis is repaired with simplex-style ratio-test pivots
(a row or column enters/leaves the basis along a certified descent direction).
Either the polish terminates at a point whose KKT residuals vanish to
round-off, or it gives up and the caller continues with plain ADMM iterations.

All candidate solutions are accepted only on a verified certificate, so the
heuristics here can never degrade correctness, only speed.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import LinAlgError, lu_factor, lu_solve

__all__ = ["polish_qr"]

# Relative feasibility slack for the dual box [tau - 1, tau].
_BOX_TOL = 1e-9
# Interpolation rows must have residuals at zero up to this times (1 + |y|_inf).
_INTERP_TOL = 1e-9
# Stationarity slack, relative to the scale of X'g and the penalty level.
_STAT_TOL = 1e-8
# Ratio-test steps below this are treated as degenerate (basis swap, no move).
_STEP_FLOOR = 0.0


def _factor(B):
    """LU-factor a square basis matrix, rejecting near-singular ones."""
    if B.shape[0] == 0:
        return None
    try:
        lu, piv = lu_factor(B, check_finite=False)
    except LinAlgError:  # pragma: no cover - lu_factor rarely raises
        return None
    diag = np.abs(np.diag(lu))
    if diag.size == 0 or diag.min() <= 1e-12 * max(diag.max(), 1.0):
        return None
    return lu, piv


def _initial_rows(resid, dual, tau, m, n):
    """Rank rows by how strongly the ADMM state marks them as interpolated.

    Rows whose dual multiplier sits strictly inside (tau - 1, tau) are
    interpolated at an optimum; rows with tiny residuals are the fallback
    signal.  The two rankings are combined lexicographically: the dual gap to
    the nearest box edge breaks ties among the smallest residuals.
    """
    if dual is not None:
        gap = np.minimum(np.abs(dual - tau), np.abs(dual - (tau - 1.0)))
        order_dual = np.argsort(-gap, kind="stable")[:m]
    else:
        order_dual = None
    order_resid = np.argsort(np.abs(resid), kind="stable")[:m]
    return order_dual, order_resid


def polish_qr(X, y, tau, lam_weights, theta0, resid0, dual0=None,
              max_pivots=None):
    """Attempt to finish a penalized quantile fit from an ADMM iterate.

    Parameters
    ----------
    X, y : design matrix (n, p) and response (n,).
    tau : quantile level in (0, 1).
    lam_weights : length-p vector of per-coordinate penalty levels
        (lambda * w_k); zeros mark unpenalized coordinates.
    theta0 : current sparse iterate (the soft-threshold block), used to read
        the candidate support.
    resid0 : current residual estimate y - X theta0.
    dual0 : optional length-n estimate of the dual vector (entries in
        [tau - 1, tau]); improves the initial interpolation-set guess.
    max_pivots : budget of basis-repair pivots before giving up; ``None``
        scales the budget with the basis dimension.  The pivot walk from a
        rough iterate can pass through bases much larger than the final
        support, so the budget must cover a path length of the order of
        ``min(n, p)`` rather than the support size.

    Returns
    -------
    None if no certified optimum was found, otherwise a tuple
    ``(theta, resid, dual)`` satisfying the KKT conditions to round-off:
    ``resid`` is exactly zero on the interpolation rows and ``dual`` is the
    certificate with ``X' dual`` matching the penalty subgradient.
    """
    n, p = X.shape
    if max_pivots is None:
        max_pivots = 6 * min(n, p) + 50
    free = lam_weights == 0.0
    support = np.flatnonzero((theta0 != 0.0) | free)
    m = support.size
    if m > min(n, p):
        return None
    y_scale = 1.0 + float(np.abs(y).max()) if n else 1.0
    interp_tol = _INTERP_TOL * y_scale

    # --- initial basis -----------------------------------------------------
    S = support
    if m:
        cand_dual, cand_resid = _initial_rows(resid0, dual0, tau, m, n)
        Z = None
        for cand in (cand_dual, cand_resid):
            if cand is None:
                continue
            fac = _factor(X[np.ix_(np.sort(cand), S)])
            if fac is not None:
                Z = np.sort(cand)
                break
        if Z is None:
            return None
    else:
        Z = np.empty(0, dtype=np.intp)

    in_S = np.zeros(p, dtype=bool)
    in_S[S] = True
    in_Z = np.zeros(n, dtype=bool)
    in_Z[Z] = True

    for _pivot in range(max_pivots + 1):
        m = S.size
        if m != Z.size or m > min(n, p):
            return None

        # --- primal solve on the basis -------------------------------------
        if m:
            B = X[np.ix_(Z, S)]
            fac = _factor(B)
            if fac is None:
                return None
            theta_S = lu_solve(fac, y[Z], check_finite=False)
            theta = np.zeros(p)
            theta[S] = theta_S
            resid = y - X[:, S] @ theta_S
            if np.abs(resid[Z]).max() > interp_tol:
                return None
            resid[Z] = 0.0
        else:
            fac = None
            theta_S = np.empty(0)
            theta = np.zeros(p)
            resid = y.copy()

        # --- dual certificate ----------------------------------------------
        g = np.where(resid > 0.0, tau, tau - 1.0)
        if m:
            off = ~in_Z
            base = X[off][:, S].T @ g[off]
            target = lam_weights[S] * np.sign(theta_S)
            g[Z] = lu_solve(fac, target - base, check_finite=False, trans=1)

        # --- KKT checks -----------------------------------------------------
        box_hi = g[Z] - tau if m else np.empty(0)
        box_lo = (tau - 1.0) - g[Z] if m else np.empty(0)
        box_viol = np.maximum(box_hi, box_lo)
        worst_box = float(box_viol.max()) if m else -np.inf

        eta = X.T @ g
        stat_tol = _STAT_TOL * (1.0 + float(np.abs(eta).max()) + float(lam_weights.max() if p else 0.0))
        off_viol = np.abs(eta) - lam_weights
        off_viol[in_S] = -np.inf
        off_viol[free] = -np.inf
        k_star = int(np.argmax(off_viol)) if p else 0
        worst_off = float(off_viol[k_star]) if p else -np.inf
        free_bad = float(np.abs(eta[free]).max()) if free.any() else 0.0

        if worst_box <= _BOX_TOL and worst_off <= stat_tol and free_bad <= stat_tol:
            return theta, resid, g

        if _pivot == max_pivots:
            return None

        # --- repair pivots ---------------------------------------------------
        if worst_box > _BOX_TOL and (worst_box >= worst_off or worst_off <= stat_tol):
            # Row i* leaves the interpolation set; its residual must move off
            # zero toward the side its multiplier overshoots.
            loc = int(np.argmax(box_viol))
            i_star = int(Z[loc])
            sigma = 1.0 if box_hi[loc] >= box_lo[loc] else -1.0
            e = np.zeros(m)
            e[loc] = 1.0
            d = lu_solve(fac, e, check_finite=False)
            # theta(t) = theta - t*sigma*d  =>  resid(t) = resid + t*sigma*X_S d
            a = X[:, S] @ d
            a[Z] = 0.0
            a[i_star] = 0.0
            rate = sigma * a
            t_rows = np.full(n, np.inf)
            move = (resid != 0.0) & (np.sign(rate) == -np.sign(resid)) & ~in_Z
            t_rows[move] = -resid[move] / rate[move]
            t_cols = np.full(m, np.inf)
            dth = -sigma * d
            shrink = (~free[S]) & (theta_S != 0.0) & (np.sign(dth) == -np.sign(theta_S))
            t_cols[shrink] = -theta_S[shrink] / dth[shrink]
            t_row = float(t_rows.min()) if n else np.inf
            t_col = float(t_cols.min()) if m else np.inf
            if not np.isfinite(min(t_row, t_col)):
                return None
            if t_row <= t_col:
                j_star = int(np.argmin(t_rows))
                in_Z[i_star] = False
                in_Z[j_star] = True
                Z = np.flatnonzero(in_Z)
            else:
                k_out = S[int(np.argmin(t_cols))]
                in_Z[i_star] = False
                in_S[k_out] = False
                Z = np.flatnonzero(in_Z)
                S = np.flatnonzero(in_S)
        else:
            # Column k* enters the support along the descent orientation.
            sigma_c = 1.0 if eta[k_star] > 0.0 else -1.0
            if m:
                dS = lu_solve(fac, X[Z, k_star], check_finite=False)
                xd = X[:, k_star] - X[:, S] @ dS
            else:
                dS = np.empty(0)
                xd = X[:, k_star].copy()
            xd[Z] = 0.0
            rate = sigma_c * xd  # resid(t) = resid - t * rate
            t_rows = np.full(n, np.inf)
            move = (resid != 0.0) & (np.sign(rate) == np.sign(resid)) & ~in_Z
            t_rows[move] = resid[move] / rate[move]
            t_cols = np.full(m, np.inf)
            dth = -sigma_c * dS
            shrink = (~free[S]) & (theta_S != 0.0) & (np.sign(dth) == -np.sign(theta_S))
            t_cols[shrink] = -theta_S[shrink] / dth[shrink]
            t_row = float(t_rows.min()) if n else np.inf
            t_col = float(t_cols.min()) if m else np.inf
            if not np.isfinite(min(t_row, t_col)):
                return None
            if t_row <= t_col:
                j_star = int(np.argmin(t_rows))
                in_Z[j_star] = True
                in_S[k_star] = True
                Z = np.flatnonzero(in_Z)
                S = np.flatnonzero(in_S)
            else:
                k_out = S[int(np.argmin(t_cols))]
                in_S[k_out] = False
                in_S[k_star] = True
                S = np.flatnonzero(in_S)
    return None
