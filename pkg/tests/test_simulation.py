"""Simulation designs, comparators, and the Monte Carlo harness."""
import numpy as np
import pytest
from scipy.stats import norm

from rankscore import (DataError, EstimateOptions, SimDesign, comparator_fit,
                       generate_dataset, run_monte_carlo)
from rankscore.simulation import ESTIMATORS


def test_design_validation():
    with pytest.raises(DataError):
        SimDesign(n=100, p=8)  # propensity needs X7, X8
    with pytest.raises(DataError):
        SimDesign(n=100, p=10, noise="exotic")
    with pytest.raises(DataError):
        SimDesign(n=100, p=10, theta1_shape="spiky")
    with pytest.raises(DataError):
        SimDesign(n=100, p=10, z_shape="block")
    with pytest.raises(DataError):
        SimDesign(n=100, p=10, theta1_norm=0.0)


def test_theta_and_z_shapes():
    d = SimDesign(n=100, p=12)
    t0, t1 = d.theta(0), d.theta(1)
    np.testing.assert_allclose(t0[[0, 2, 3]], [0.5, 1.0, -1.0])
    assert np.count_nonzero(t0) == 3
    assert np.count_nonzero(t1) == 6
    assert np.linalg.norm(t1) == pytest.approx(1.0)
    z = d.z()
    assert np.count_nonzero(z) == 2
    assert np.linalg.norm(z) == pytest.approx(1.0)
    dd = SimDesign(n=100, p=12, theta1_shape="dense", theta1_norm=2.0,
                   z_shape="dense")
    assert np.count_nonzero(dd.theta(1)) == 12
    assert np.linalg.norm(dd.theta(1)) == pytest.approx(2.0)
    assert np.count_nonzero(dd.z()) == 12


def test_true_alpha_closed_form():
    d = SimDesign(n=100, p=12)
    z = d.z()
    want = float(z @ (d.theta(1) - d.theta(0)))
    assert d.true_alpha(0.5) == pytest.approx(want)
    assert d.true_alpha(0.25) == pytest.approx(want)  # homoscedastic: flat
    h = SimDesign(n=100, p=12, noise="heteroscedastic")
    zh = h.z()
    base = float(zh @ (h.theta(1) - h.theta(0)))
    assert h.true_alpha(0.5) == pytest.approx(base)
    got = h.true_alpha(0.75)
    want = base + norm.ppf(0.75) * (zh[2] - zh[1])
    assert got == pytest.approx(want)


def test_quantile_coefficients_shift_the_scale_column():
    d = SimDesign(n=100, p=12)
    th = d.quantile_coefficients(1, 0.9)
    np.testing.assert_allclose(th - d.theta(1),
                               norm.ppf(0.9) * np.eye(12)[0], atol=1e-12)
    h = SimDesign(n=100, p=12, noise="heteroscedastic")
    th1 = h.quantile_coefficients(1, 0.9)
    assert th1[2] - h.theta(1)[2] == pytest.approx(norm.ppf(0.9))
    th0 = h.quantile_coefficients(0, 0.9)
    assert th0[1] - h.theta(0)[1] == pytest.approx(norm.ppf(0.9))


def test_true_support_contains_actives_and_scale_column():
    d = SimDesign(n=100, p=12)
    np.testing.assert_array_equal(d.true_support(0), [0, 2, 3])
    np.testing.assert_array_equal(d.true_support(1), [0, 1, 2, 3, 4, 5])
    h = SimDesign(n=100, p=12, noise="heteroscedastic")
    assert 1 in h.true_support(0) and 2 in h.true_support(1)


def test_generate_dataset_reproducible_and_well_formed():
    d = SimDesign(n=500, p=10)
    ds1, alpha_fn = generate_dataset(d, np.random.default_rng(42))
    ds2, _ = generate_dataset(d, np.random.default_rng(42))
    np.testing.assert_array_equal(ds1.y, ds2.y)
    np.testing.assert_array_equal(ds1.d, ds2.d)
    np.testing.assert_array_equal(ds1.x, ds2.x)
    assert ds1.n == 500 and ds1.p == 10
    np.testing.assert_array_equal(ds1.x[:, 0], np.ones(500))
    assert alpha_fn(0.5) == d.true_alpha(0.5)
    assert 0.2 < ds1.d.mean() < 0.95  # logistic assignment, both arms filled


def test_generate_dataset_covariance_structure():
    d = SimDesign(n=20000, p=9)
    ds, _ = generate_dataset(d, np.random.default_rng(7))
    W = ds.x[:, 1:]
    corr = np.corrcoef(W, rowvar=False)
    # AR(0.5): corr(W_j, W_k) = 0.5^|j-k|
    assert abs(corr[0, 1] - 0.5) < 0.03
    assert abs(corr[0, 2] - 0.25) < 0.03
    assert abs(np.var(W[:, 3]) - 1.0) < 0.05


def test_generated_quantiles_match_the_linear_cqf():
    # conditional quantile check on one x-cell via many repeated draws
    d = SimDesign(n=60000, p=9)
    ds, _ = generate_dataset(d, np.random.default_rng(8))
    x1, y1, _ = ds.arm(1)
    # residual at the tau-quantile coefficient vector should have tau mass below 0
    for tau in (0.25, 0.75):
        resid = y1 - x1 @ d.quantile_coefficients(1, tau)
        assert abs((resid <= 0).mean() - tau) < 0.01


def test_comparator_oracle_recovers_truth():
    d = SimDesign(n=800, p=10)
    ds, _ = generate_dataset(d, np.random.default_rng(21))
    alpha, (lo, hi) = comparator_fit(ds, d.z(), 0.5, "oracle", design=d)
    assert lo < alpha < hi
    assert abs(alpha - d.true_alpha(0.5)) < 0.5
    with pytest.raises(DataError):
        comparator_fit(ds, d.z(), 0.5, "oracle")  # design required
    with pytest.raises(DataError):
        comparator_fit(ds, d.z(), 0.5, "ridge")


def test_comparator_lasso_and_refit_share_lambda_hooks():
    d = SimDesign(n=400, p=10)
    ds, _ = generate_dataset(d, np.random.default_rng(22))
    lam_by_arm = {1: 5.0, 0: 5.0}
    a_refit, _ = comparator_fit(ds, d.z(), 0.5, "refit", lam_by_arm=lam_by_arm)
    a_lasso, _ = comparator_fit(ds, d.z(), 0.5, "lasso", lam_by_arm=lam_by_arm)
    assert np.isfinite(a_refit) and np.isfinite(a_lasso)
    assert a_refit != a_lasso  # refit undoes the coefficient shrinkage


def test_run_monte_carlo_small_oracle_study():
    d = SimDesign(n=300, p=9)
    mc = run_monte_carlo(d, [0.5], n_reps=4, estimators=("oracle",),
                         n_workers=1, seed=99)
    assert mc.failures == {"oracle": 0}
    assert len(mc.rows) == 1
    row = mc.rows[0]
    assert row["estimator"] == "oracle" and row["tau"] == 0.5
    assert row["n_used"] == 4
    assert 0.0 <= row["coverage"] <= 1.0
    assert row["true_alpha"] == pytest.approx(d.true_alpha(0.5))
    assert np.isfinite(row["sqrt_n_bias"]) and row["n_variance"] > 0.0


def test_run_monte_carlo_is_seed_deterministic():
    d = SimDesign(n=250, p=9)
    a = run_monte_carlo(d, [0.5], n_reps=3, estimators=("oracle",), seed=5,
                        keep_samples=True)
    b = run_monte_carlo(d, [0.5], n_reps=3, estimators=("oracle",), seed=5,
                        keep_samples=True)
    np.testing.assert_array_equal(a.samples[("oracle", 0.5)]["alpha"],
                                  b.samples[("oracle", 0.5)]["alpha"])


def test_run_monte_carlo_validation():
    d = SimDesign(n=200, p=9)
    with pytest.raises(DataError):
        run_monte_carlo(d, [0.5], n_reps=1, estimators=("oracle",))
    with pytest.raises(DataError):
        run_monte_carlo(d, [0.5], n_reps=3, estimators=("magic",))
    with pytest.raises(DataError):
        run_monte_carlo(d, [], n_reps=3, estimators=("oracle",))
    dense = SimDesign(n=200, p=9, theta1_shape="dense")
    with pytest.raises(DataError):
        run_monte_carlo(dense, [0.5], n_reps=3, estimators=("oracle",))


def test_estimator_registry():
    assert set(ESTIMATORS) == {"oracle", "refit", "lasso", "rank_min",
                               "rank_1se", "rank_2se"}


def test_rank_estimator_one_replication():
    # one tiny end-to-end rank replication through the harness
    d = SimDesign(n=220, p=9)
    opts = EstimateOptions(band=False, folds=5)
    mc = run_monte_carlo(d, [0.5], n_reps=2, estimators=("rank_1se",),
                         seed=77, options=opts, keep_samples=True)
    s = mc.samples[("rank_1se", 0.5)]
    assert s["alpha"].shape == (2,)
    assert np.all(s["sigma2"] > 0.0)
    assert np.all(s["ci_low"] < s["ci_high"])
