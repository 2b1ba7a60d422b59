# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: initializedcheck=False, language_level=3
"""Compiled ADMM inner loops.

Same two entry points, argument order, and return values as
`_kernels_py`; see that module for the reference implementation and the
conventions shared by both backends.
"""
import numpy as np

from libc.math cimport INFINITY, fabs, sqrt
from scipy.linalg.cython_blas cimport dcopy, ddot, dgemv, dnrm2
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs

BACKEND_NAME = "cython"


cdef inline double _soft1(double x, double t) nogil:
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


cdef void _xt_vec(double[:, ::1] X, double *v, double *out) nogil:
    # out = X'v.  The C-contiguous buffer of X read in Fortran order is
    # X', so trans='N' multiplies by the transpose.
    cdef int n = X.shape[0], p = X.shape[1], inc = 1
    cdef double one = 1.0, zero = 0.0
    cdef char trans = b'N'
    dgemv(&trans, &p, &n, &one, &X[0, 0], &p, v, &inc, &zero, out, &inc)


cdef void _x_vec(double[:, ::1] X, double *v, double *out) nogil:
    # out = Xv via trans='T' on the Fortran view (see _xt_vec).
    cdef int n = X.shape[0], p = X.shape[1], inc = 1
    cdef double one = 1.0, zero = 0.0
    cdef char trans = b'T'
    dgemv(&trans, &p, &n, &one, &X[0, 0], &p, v, &inc, &zero, out, &inc)


def penalized_qr_admm(double[:, ::1] X, double[::1] y, double[:, ::1] chol_l,
                      double[::1] thr, double tau, double rho, double tol,
                      int max_iter, double adapt_factor, double adapt_ratio,
                      double[::1] theta, double[::1] r, double[::1] s,
                      double[::1] u1, double[::1] u2):
    """ADMM for weighted l1-penalized quantile regression.

    `chol_l` is the lower Cholesky factor of X'X + I from numpy; its
    C-contiguous buffer is the upper factor in Fortran order, hence
    uplo='U' below.  State vectors are updated in place.
    """
    cdef int n = X.shape[0], p = X.shape[1]
    cdef int inc = 1, info = 0, nrhs = 1, it = 0, i, k
    cdef char uplo = b'U'
    cdef double pri = INFINITY, dual = INFINITY
    cdef double sig, val, pri1, pri2, sax, sbz, hold, eps_pri, eps_dual

    cdef double[::1] rhs = np.empty(p)
    cdef double[::1] xth = np.empty(n)
    cdef double[::1] tn = np.empty(n)
    cdef double[::1] tp = np.empty(p)
    cdef double[::1] dvec = np.empty(p)
    cdef double[::1] r_old = np.empty(n)
    cdef double[::1] s_old = np.empty(p)
    cdef double norm_y = dnrm2(&n, &y[0], &inc)

    for it in range(1, max_iter + 1):
        for i in range(n):
            tn[i] = y[i] - r[i] - u1[i]
        _xt_vec(X, &tn[0], &rhs[0])
        for k in range(p):
            rhs[k] += s[k] - u2[k]
        dcopy(&p, &rhs[0], &inc, &theta[0], &inc)
        dpotrs(&uplo, &p, &nrhs, &chol_l[0, 0], &p, &theta[0], &p, &info)
        _x_vec(X, &theta[0], &xth[0])

        sig = 1.0 / rho
        for i in range(n):
            r_old[i] = r[i]
            val = y[i] - xth[i] - u1[i]
            if val > sig * tau:
                r[i] = val - sig * tau
            elif val < -sig * (1.0 - tau):
                r[i] = val + sig * (1.0 - tau)
            else:
                r[i] = 0.0
        for k in range(p):
            s_old[k] = s[k]
            s[k] = _soft1(theta[k] + u2[k], thr[k] / rho)

        pri1 = 0.0
        for i in range(n):
            val = xth[i] + r[i] - y[i]
            u1[i] += val
            pri1 += val * val
        pri2 = 0.0
        for k in range(p):
            val = theta[k] - s[k]
            u2[k] += val
            pri2 += val * val
        pri = sqrt(pri1 + pri2)

        for i in range(n):
            tn[i] = r[i] - r_old[i]
        _xt_vec(X, &tn[0], &dvec[0])
        for k in range(p):
            dvec[k] -= s[k] - s_old[k]
        dual = rho * dnrm2(&p, &dvec[0], &inc)

        sax = sqrt(ddot(&n, &xth[0], &inc, &xth[0], &inc)
                   + ddot(&p, &theta[0], &inc, &theta[0], &inc))
        sbz = sqrt(ddot(&n, &r[0], &inc, &r[0], &inc)
                   + ddot(&p, &s[0], &inc, &s[0], &inc))
        hold = sax if sax > sbz else sbz
        if norm_y > hold:
            hold = norm_y
        eps_pri = tol * (1.0 + hold)
        _xt_vec(X, &u1[0], &tp[0])
        for k in range(p):
            tp[k] += u2[k]
        eps_dual = tol * (1.0 + rho * dnrm2(&p, &tp[0], &inc))
        if pri <= eps_pri and dual <= eps_dual:
            return it, pri, dual, 1, rho

        if pri > adapt_ratio * dual:
            rho *= adapt_factor
            for i in range(n):
                u1[i] /= adapt_factor
            for k in range(p):
                u2[k] /= adapt_factor
        elif dual > adapt_ratio * pri:
            rho /= adapt_factor
            for i in range(n):
                u1[i] *= adapt_factor
            for k in range(p):
                u2[k] *= adapt_factor
    return it, pri, dual, 0, rho


cdef int _shifted_factor(double[:, ::1] A, double[:, ::1] M, double rho) nogil:
    # M = chol(A + rho I); uplo='U' on the Fortran view stores the factor
    # in the lower C triangle (A is symmetric).
    cdef int p = A.shape[0], info = 0, j, k
    cdef char uplo = b'U'
    for k in range(p):
        for j in range(p):
            M[k, j] = A[k, j]
        M[k, k] += rho
    dpotrf(&uplo, &p, &M[0, 0], &p, &info)
    return info


def l1_quad_admm(double[:, ::1] A, double[::1] lin, double l1w, double rho,
                 double tol, int max_iter, double adapt_factor,
                 double adapt_ratio, double obj_floor, double[::1] v,
                 double[::1] u, double[::1] w):
    """ADMM for min_v 0.5 v'Av + lin'v + l1w ||v||_1 with A symmetric PSD.

    Refactors A + rho I whenever rho adapts; flags the problem unbounded
    when the objective falls below `obj_floor`.  State vectors are
    updated in place.
    """
    cdef int p = A.shape[0]
    cdef int inc = 1, info = 0, nrhs = 1, it = 0, k
    cdef char uplo = b'U'
    cdef double pri = INFINITY, dual = INFINITY
    cdef double uo, nu, diff, pri1, d1, nv, nu2, hold, eps_pri, eps_dual, obj

    cdef double[:, ::1] M = np.empty((p, p))
    cdef double[::1] av = np.empty(p)

    if _shifted_factor(A, M, rho) != 0:
        raise np.linalg.LinAlgError("factorization of A + rho I failed")

    for it in range(1, max_iter + 1):
        for k in range(p):
            v[k] = rho * (u[k] - w[k]) - lin[k]
        dpotrs(&uplo, &p, &nrhs, &M[0, 0], &p, &v[0], &p, &info)

        pri1 = 0.0
        d1 = 0.0
        for k in range(p):
            uo = u[k]
            nu = _soft1(v[k] + w[k], l1w / rho)
            u[k] = nu
            w[k] += v[k] - nu
            diff = v[k] - nu
            pri1 += diff * diff
            diff = nu - uo
            d1 += diff * diff
        pri = sqrt(pri1)
        dual = rho * sqrt(d1)

        nv = dnrm2(&p, &v[0], &inc)
        nu2 = dnrm2(&p, &u[0], &inc)
        hold = nv if nv > nu2 else nu2
        eps_pri = tol * (1.0 + hold)
        eps_dual = tol * (1.0 + rho * dnrm2(&p, &w[0], &inc))
        if pri <= eps_pri and dual <= eps_dual:
            return it, pri, dual, 1, rho, 0

        if it % 25 == 0:
            _xt_vec(A, &v[0], &av[0])  # A symmetric: A'v = Av
            obj = 0.5 * ddot(&p, &v[0], &inc, &av[0], &inc)
            obj += ddot(&p, &lin[0], &inc, &v[0], &inc)
            for k in range(p):
                obj += l1w * fabs(v[k])
            if obj < obj_floor:
                return it, pri, dual, 0, rho, 1

        if pri > adapt_ratio * dual:
            rho *= adapt_factor
            for k in range(p):
                w[k] /= adapt_factor
            if _shifted_factor(A, M, rho) != 0:
                raise np.linalg.LinAlgError(
                    "factorization of A + rho I failed")
        elif dual > adapt_ratio * pri:
            rho /= adapt_factor
            for k in range(p):
                w[k] *= adapt_factor
            if _shifted_factor(A, M, rho) != 0:
                raise np.linalg.LinAlgError(
                    "factorization of A + rho I failed")
    return it, pri, dual, 0, rho, 0
