"""Conditional density estimation via the quantile difference quotient.

f_i(tau) = 2h / (x_i'theta(tau+h) - x_i'theta(tau-h)) with theta(.) the
refit (post-selection) quantile regression coefficients, a bandwidth rule
h = min{n^(-1/6), tau(1-tau)/2}, and a floor for entries where the
estimated quantile path is non-monotone.
"""
import numpy as np
from dataclasses import dataclass, field

from .exceptions import DataError, EstimationError
from .qr import QrFit, _intercept_column, refit_qr, solve_penalized_qr

__all__ = ["bandwidth", "DensitySlice", "densities_from_coefficients",
           "estimate_densities"]

FLOOR_SCALE = 1e-4
FLOOR_FALLBACK = 1e-6
CAP_SCALE = 5.0


def bandwidth(tau, n):
    """h = min(n^(-1/6), tau(1-tau)/2); always keeps tau +/- h inside (0,1)."""
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise DataError(f"tau must lie in (0, 1), got {tau}")
    if n < 2:
        raise DataError(f"need n >= 2 for the bandwidth rule, got {n}")
    return min(float(n) ** (-1.0 / 6.0), tau * (1.0 - tau) / 2.0)


@dataclass(frozen=True)
class DensitySlice:
    """Estimated densities f_i(tau) for one group at one quantile level."""
    tau: float
    h: float
    values: np.ndarray
    floor_applied: np.ndarray
    cap_applied: np.ndarray = None
    fit_low: QrFit = None
    fit_high: QrFit = None

    @property
    def n_floored(self):
        return int(self.floor_applied.sum())

    @property
    def n_capped(self):
        return 0 if self.cap_applied is None else int(self.cap_applied.sum())


def densities_from_coefficients(X, theta_low, theta_high, h, tau=None):
    """Difference-quotient densities from given coefficient vectors.

    Entries with nonpositive denominator x_i'(theta_high - theta_low) are
    clipped to FLOOR_SCALE times the median of the positive estimates
    (FLOOR_FALLBACK if there are none) and flagged.  Entries whose
    denominator is positive but vanishingly small -- the same quantile
    near-crossing pathology from the other side -- are winsorized at
    CAP_SCALE times the median and flagged separately; a single such entry
    would otherwise dominate every squared-density sum downstream.
    """
    X = np.asarray(X, dtype=np.float64)
    h = float(h)
    if h <= 0.0:
        raise DataError(f"bandwidth must be positive, got {h}")
    denom = X @ (np.asarray(theta_high, float) - np.asarray(theta_low, float))
    good = denom > 0.0
    if not good.any():
        raise EstimationError(
            "all difference-quotient denominators are nonpositive; the "
            "estimated quantile path is decreasing everywhere")
    values = np.empty_like(denom)
    values[good] = 2.0 * h / denom[good]
    med = float(np.median(values[good]))
    floor = FLOOR_SCALE * med
    if floor <= 0.0:
        floor = FLOOR_FALLBACK
    cap = CAP_SCALE * med if med > 0.0 else np.inf
    values[~good] = floor
    capped = values > cap
    np.minimum(values, cap, out=values)
    np.maximum(values, floor, out=values)
    floored = values <= floor
    return DensitySlice(tau=float(tau) if tau is not None else float("nan"),
                        h=h, values=values, floor_applied=floored,
                        cap_applied=capped)


def _pilot_at(X, y, t, lam, penalty_weights, settings, cache):
    """Penalized fit at level t, memoized on the rounded level."""
    key = ("pilot", round(float(t), 12))
    if cache is not None and key in cache:
        return cache[key]
    lam_t = lam(t) if callable(lam) else float(lam)
    pilot = solve_penalized_qr(X, y, t, lam_t, penalty_weights=penalty_weights,
                               settings=settings)
    if cache is not None:
        cache[key] = pilot
    return pilot


def _refit_at(X, y, t, support, settings, cache):
    """Unpenalized fit at level t on a fixed support, memoized on both."""
    key = ("refit", round(float(t), 12), support.tobytes())
    if cache is not None and key in cache:
        return cache[key]
    refit = refit_qr(X, y, t, support, settings=settings)
    if cache is not None:
        cache[key] = refit
    return refit


def estimate_densities(X, y, tau, lam, penalty_weights=None, settings=None,
                       h=None, cache=None):
    """Densities for one group at level tau via the refit quantile fits
    at tau - h and tau + h.

    `lam` is the penalty level for the pilot fits; passing a callable maps
    each fitted quantile level to its own penalty (for rules that scale the
    base level by sqrt(t(1-t))).  `h` defaults to the bandwidth rule applied
    to the group size; pipelines working with a larger total sample pass the
    rule's value explicitly.  `cache` (a dict) memoizes the (pilot, refit)
    pair per quantile level so overlapping grid points reuse work.
    """
    tau = float(tau)
    if h is None:
        h = bandwidth(tau, X.shape[0])
    if not (0.0 < tau - h and tau + h < 1.0):
        raise DataError(f"tau +/- h must stay inside (0, 1): tau={tau}, h={h}")
    pilot_low = _pilot_at(X, y, tau - h, lam, penalty_weights, settings, cache)
    pilot_high = _pilot_at(X, y, tau + h, lam, penalty_weights, settings, cache)
    # Both levels are refitted on the union of the two selected supports,
    # always including the intercept.  A shared design submatrix makes the
    # two fits' leading-order sampling errors strongly correlated, so they
    # largely cancel in the difference quotient's denominator; per-level
    # supports would leave the symmetric-difference coordinates' noise
    # uncancelled in every denominator.  The intercept must be present
    # because it carries the level shift between the two fits, and the
    # penalized pilots are free to shrink it away.
    support = np.union1d(pilot_low.support, pilot_high.support)
    icol = _intercept_column(X)
    if icol is not None and icol not in support:
        support = np.union1d(support, [icol])
    support = support.astype(np.intp)
    refit_low = _refit_at(X, y, tau - h, support, settings, cache)
    refit_high = _refit_at(X, y, tau + h, support, settings, cache)
    slice_ = densities_from_coefficients(X, refit_low.theta, refit_high.theta,
                                         h, tau=tau)
    return DensitySlice(tau=tau, h=h, values=slice_.values,
                        floor_applied=slice_.floor_applied,
                        cap_applied=slice_.cap_applied,
                        fit_low=refit_low, fit_high=refit_high)
