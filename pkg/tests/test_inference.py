"""Debiased CQF assembly, variances, bands, and the full pipeline."""
import numpy as np
import pytest
from scipy.stats import norm
from types import SimpleNamespace

from rankscore import (DataError, DebiasWeights, EstimateOptions, QrFit,
                       SimDesign, covariance_matrix, debiased_cqf,
                       estimate_full, generate_dataset, hqte, integrated_hqte,
                       pointwise_ci, solve_dual, uniform_band, variance_dual,
                       variance_primal)
from rankscore import DebiasProblem, recover_weights


def _fit(theta, tau):
    theta = np.asarray(theta, dtype=np.float64)
    return QrFit(theta=theta, support=np.flatnonzero(theta), tau=tau,
                 lam=0.0, iterations=0, primal_residual=0.0,
                 dual_residual=0.0, converged=True)


def test_debiased_cqf_by_hand():
    X = np.array([[1.0, 0.0], [1.0, 1.0]])
    y = np.array([2.0, 0.0])
    pilot = _fit([1.0, 2.0], 0.5)
    w = DebiasWeights(w=np.array([0.2, -0.1]), source="manual")
    f = np.array([1.0, 0.5])
    est = debiased_cqf(np.array([1.0, 0.0]), pilot, w, f, y, X, 0.5,
                       n_total=8, group=1)
    # residuals (1, -3) -> psi = (0.5, -0.5);
    # correction = (0.2*0.5/1 + 0.1*0.5/0.5) / sqrt(8)
    want = 1.0 + (0.1 + 0.1) / np.sqrt(8.0)
    assert est.q_hat == pytest.approx(want, rel=1e-12)
    assert est.group == 1


def test_hqte_is_a_difference_and_validates():
    X = np.ones((2, 1))
    y = np.zeros(2)
    w = DebiasWeights(w=np.zeros(2), source="manual")
    f = np.ones(2)
    z = np.array([1.0])
    a = debiased_cqf(z, _fit([3.0], 0.5), w, f, y, X, 0.5, 4)
    b = debiased_cqf(z, _fit([1.0], 0.5), w, f, y, X, 0.5, 4)
    assert hqte(a, b) == pytest.approx(2.0)
    c = debiased_cqf(z, _fit([1.0], 0.25), w, f, y, X, 0.25, 4)
    with pytest.raises(DataError):
        hqte(a, c)


def test_variance_identity_on_solved_duals():
    rng = np.random.default_rng(31)
    for _ in range(5):
        n_d, p = 40, 6
        X = rng.standard_normal((n_d, p))
        f = rng.uniform(0.5, 2.0, size=n_d)
        z = rng.standard_normal(p)
        n_total = 90
        gamma = 0.2 * n_total * np.max(np.abs(z))
        prob = DebiasProblem(group_design=X, densities=f, z=z, gamma=gamma,
                             n_total=n_total)
        sol = solve_dual(prob)
        w = recover_weights(sol, prob)
        tau = 0.35
        s2_primal = variance_primal(w, f, tau)
        s2_dual = variance_dual(sol, f, X, tau, n_total)
        assert abs(s2_primal - s2_dual) < 1e-10 * max(1.0, s2_primal)


def test_covariance_matrix_diagonal_matches_variance():
    rng = np.random.default_rng(32)
    n_d, p = 30, 4
    X = rng.standard_normal((n_d, p))
    f1 = rng.uniform(0.5, 2.0, size=n_d)
    f2 = rng.uniform(0.5, 2.0, size=n_d)
    v1, v2 = rng.standard_normal(p), rng.standard_normal(p)
    duals = [SimpleNamespace(v=v1), SimpleNamespace(v=v2)]
    taus = np.array([0.3, 0.6])
    H = covariance_matrix(duals, [f1, f2], X, taus, n_total=70)
    assert H.shape == (2, 2)
    assert H[0, 0] == pytest.approx(
        variance_dual(duals[0], f1, X, 0.3, 70), rel=1e-12)
    assert H[1, 1] == pytest.approx(
        variance_dual(duals[1], f2, X, 0.6, 70), rel=1e-12)
    assert H[0, 1] == H[1, 0]
    # hand recomputation of the cross term
    a1, a2 = f1 * (X @ v1), f2 * (X @ v2)
    want = (0.3 - 0.3 * 0.6) * float(a1 @ a2) / (4.0 * 70)
    assert H[0, 1] == pytest.approx(want, rel=1e-12)


def test_pointwise_ci_formula():
    lo, hi = pointwise_ci(np.array([1.0]), np.array([4.0]), 100, level=0.9)
    half = norm.ppf(0.95) * 0.2
    assert lo[0] == pytest.approx(1.0 - half)
    assert hi[0] == pytest.approx(1.0 + half)
    with pytest.raises(DataError):
        pointwise_ci(np.array([1.0]), np.array([4.0]), 100, level=1.5)
    with pytest.raises(DataError):
        pointwise_ci(np.array([1.0]), np.array([-1.0]), 100)


def test_uniform_band_one_point_is_gaussian_quantile():
    kappa, (lo, hi) = uniform_band(np.array([[2.0]]), np.array([[1.0]]),
                                   np.array([3.0]), np.array([0.5]),
                                   n_total=300, n_draws=40000, seed=7)
    assert abs(kappa - norm.ppf(0.975)) < 0.03
    assert lo[0] == pytest.approx(0.5 - kappa * np.sqrt(3.0 / 300.0))
    assert hi[0] == pytest.approx(0.5 + kappa * np.sqrt(3.0 / 300.0))


def test_uniform_band_two_independent_points():
    H1 = np.eye(2) * 0.5
    H0 = np.eye(2) * 0.5
    kappa, _ = uniform_band(H1, H0, np.array([1.0, 1.0]),
                            np.array([0.0, 0.0]), n_total=100,
                            n_draws=60000, seed=8)
    want = norm.ppf(0.5 * (1.0 + np.sqrt(0.95)))
    assert abs(kappa - want) < 0.03


def test_integrated_hqte_trapezoid():
    taus = np.array([0.3, 0.7])
    alpha = np.array([1.0, 3.0])
    H1 = np.eye(2) * 0.6
    H0 = np.eye(2) * 0.4
    est, (lo, hi) = integrated_hqte(alpha, H1, H0, taus, n_total=400,
                                    n_draws=20000, seed=9)
    assert est == pytest.approx(0.4 * 2.0)
    assert lo < est < hi
    with pytest.raises(DataError):
        integrated_hqte(alpha[:1], H1[:1, :1], H0[:1, :1], taus[:1], 400)


@pytest.fixture(scope="module")
def pipeline_result():
    design = SimDesign(n=250, p=10)
    dataset, _ = generate_dataset(design, np.random.default_rng(2024))
    opts = EstimateOptions(band=True, integrated=True, band_draws=20000,
                           seed=11, keep_cv=True)
    result = estimate_full(dataset, design.z(), [0.35, 0.5, 0.65], opts)
    return design, dataset, opts, result


def test_pipeline_shapes_and_fields(pipeline_result):
    design, dataset, opts, res = pipeline_result
    assert res.tau_grid.shape == (3,)
    for arr in (res.alpha_hat, res.sigma2, res.ci_low, res.ci_high,
                res.band_low, res.band_high):
        assert arr.shape == (3,)
    assert np.all(res.sigma2 > 0.0)
    assert np.all(res.ci_low < res.alpha_hat) and np.all(res.alpha_hat < res.ci_high)
    assert res.H1.shape == (3, 3) and res.H0.shape == (3, 3)
    assert res.kappa >= norm.ppf(0.975) - 0.05
    assert np.all(res.band_low <= res.ci_low + 1e-12)
    assert np.all(res.ci_high <= res.band_high + 1e-12)
    assert res.integrated["ci_low"] < res.integrated["estimate"] < res.integrated["ci_high"]
    diag = res.diagnostics
    assert diag["n"] == dataset.n and diag["p"] == dataset.p
    assert diag["backend"] in ("cython", "python")
    assert len(diag["arm1"]["taus"]) == 3
    assert res.arm1.records[0].cv is not None  # keep_cv stored the curves


def test_pipeline_variance_identity_and_truth(pipeline_result):
    design, dataset, opts, res = pipeline_result
    diag_sum = np.diag(res.H1 + res.H0)
    np.testing.assert_allclose(diag_sum, res.sigma2, rtol=1e-9, atol=1e-12)
    # debiased point estimates sit within a few sampling sds of the truth
    for j, t in enumerate(res.tau_grid):
        sd = np.sqrt(res.sigma2[j] / dataset.n)
        assert abs(res.alpha_hat[j] - design.true_alpha(t)) < 6.0 * sd


def test_pipeline_is_deterministic(pipeline_result):
    design, dataset, opts, res = pipeline_result
    again = estimate_full(dataset, design.z(), [0.35, 0.5, 0.65], opts)
    np.testing.assert_array_equal(res.alpha_hat, again.alpha_hat)
    np.testing.assert_array_equal(res.sigma2, again.sigma2)
    assert res.kappa == again.kappa


def test_pipeline_gamma_override_skips_cv():
    design = SimDesign(n=200, p=9)
    dataset, _ = generate_dataset(design, np.random.default_rng(5))
    opts = EstimateOptions(band=False, gamma_override=40.0, seed=3)
    res = estimate_full(dataset, design.z(), [0.5], opts)
    rec = res.arm1.records[0]
    assert rec.gamma == 40.0 and rec.cv is None


def test_pipeline_validates_inputs():
    design = SimDesign(n=120, p=9)
    dataset, _ = generate_dataset(design, np.random.default_rng(6))
    with pytest.raises(DataError):
        estimate_full(dataset, design.z(), [])
    with pytest.raises(DataError):
        estimate_full(dataset, design.z(), [1.5])
    with pytest.raises(DataError):
        estimate_full(dataset, design.z()[:5], [0.5])
    with pytest.raises(DataError):
        estimate_full(dataset, design.z(), [0.5],
                      EstimateOptions(gamma_rule="min",
                                      gamma_rules=("one_se",)))
