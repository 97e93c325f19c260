import math

import numpy as np
import pytest

from ipdperm.errors import NonIdentifiableError
from ipdperm.model import IpdDataset, VarianceComponents
from ipdperm.reml import fit_reml, restricted_log_likelihood, t_statistic
from _oracles import dense_reml_criterion, simulate_ipd


def test_criterion_matches_dense_oracle_equal_variances():
    ds = simulate_ipd(42, k=4)
    for tau2, s2 in [(0.0, 1.0), (0.3, 1.2), (2.0, 0.4), (1e-8, 3.0)]:
        vc = VarianceComponents.equal(tau2, s2, 4)
        mine = restricted_log_likelihood(vc, ds)
        oracle = dense_reml_criterion(ds, tau2, s2)
        assert mine == pytest.approx(oracle, rel=1e-10, abs=1e-9)


def test_criterion_matches_dense_oracle_unequal_and_null():
    ds = simulate_ipd(43, k=3, sigma=[0.8, 1.2, 1.7])
    sigma2 = np.array([0.9, 1.1, 2.2])
    vc = VarianceComponents(0.17, sigma2)
    for include in (True, False):
        mine = restricted_log_likelihood(vc, ds, include_treatment=include)
        oracle = dense_reml_criterion(ds, 0.17, sigma2, include_treatment=include)
        assert mine == pytest.approx(oracle, rel=1e-10, abs=1e-9)


def test_criterion_single_study_closed_form():
    # k=1 at tau2=0 reduces to the fixed-effects REML of y ~ 1 + y0 + z:
    # -1/2 [(n-q) log s2 + RSS/s2 + log|C'C|]
    rng = np.random.default_rng(12)
    y0 = rng.normal(0, 1, 8)
    y = 2.0 + 0.5 * y0 + rng.normal(0, 1, 8)
    z = [1, 0, 1, 0, 1, 1, 0, 0]
    ds = IpdDataset.from_arrays(["s"] * 8, y, y0, z)
    s2 = 1.37
    mine = restricted_log_likelihood(VarianceComponents.equal(0.0, s2, 1), ds)
    c_mat = np.column_stack([np.ones(8), ds.y0, ds.z_float])
    beta, *_ = np.linalg.lstsq(c_mat, ds.y, rcond=None)
    rss = float(np.sum((ds.y - c_mat @ beta) ** 2))
    closed = -0.5 * (5 * math.log(s2) + rss / s2 + np.linalg.slogdet(c_mat.T @ c_mat)[1])
    assert mine == pytest.approx(closed, abs=1e-10)


def test_criterion_prefers_truth_over_garbage():
    ds = simulate_ipd(44, k=4, tau=0.5, sigma=1.0)
    good = restricted_log_likelihood(VarianceComponents.equal(0.25, 1.0, 4), ds)
    bad = restricted_log_likelihood(VarianceComponents.equal(0.25, 100.0, 4), ds)
    assert good > bad


def test_fit_beats_small_grid():
    ds = simulate_ipd(45, k=2, size_lo=4, size_hi=4, tau=0.8)
    fit = fit_reml(ds)
    best = -math.inf
    for lt in np.linspace(-8, 3, 60):
        for ls in np.linspace(-3, 3, 60):
            val = restricted_log_likelihood(
                VarianceComponents.equal(math.exp(lt), math.exp(ls), 2), ds
            )
            best = max(best, val)
    assert fit.restricted_loglik >= best - 1e-6


def test_optimum_beats_generating_parameters():
    for seed in range(3):
        ds = simulate_ipd(300 + seed, k=4, tau=0.5, sigma=1.0)
        fit = fit_reml(ds)
        at_truth = restricted_log_likelihood(VarianceComponents.equal(0.25, 1.0, 4), ds)
        assert fit.restricted_loglik >= at_truth - 1e-9


def test_theta_recovery_medium_sizes():
    # medium-study-size row at near-zero heterogeneity: the estimate should
    # sit within 3 standard errors essentially always
    hits = 0
    n_rep = 200
    for r in range(n_rep):
        ds = simulate_ipd(10_000 + r, k=4, theta=0.7, tau=0.01, sigma=1.0,
                          size_lo=100, size_hi=200)
        fit = fit_reml(ds)
        hits += abs(fit.theta_hat - 0.7) < 3 * fit.se_theta
    assert hits / n_rep >= 0.99


def test_location_shift_moves_only_intercepts():
    ds = simulate_ipd(46)
    fit = fit_reml(ds)
    shifted = fit_reml(ds.with_outcome(ds.y + 5.0))
    assert shifted.theta_hat == pytest.approx(fit.theta_hat, abs=1e-7)
    assert shifted.vc_hat.tau2 == pytest.approx(fit.vc_hat.tau2, abs=1e-7)
    assert np.allclose(shifted.vc_hat.sigma2, fit.vc_hat.sigma2, atol=1e-7)
    assert t_statistic(shifted) == pytest.approx(t_statistic(fit), abs=1e-6)
    k = ds.k
    assert np.allclose(shifted.beta_hat[:k], fit.beta_hat[:k] + 5.0, atol=1e-6)
    assert np.allclose(shifted.beta_hat[k:], fit.beta_hat[k:], atol=1e-6)


def test_scale_equivariance():
    ds = simulate_ipd(47, tau=0.4)
    fit = fit_reml(ds)
    c = 2.0
    scaled = fit_reml(IpdDataset.from_arrays(ds.study_index, c * ds.y, c * ds.y0, ds.z))
    assert scaled.theta_hat == pytest.approx(c * fit.theta_hat, rel=1e-6)
    assert scaled.se_theta == pytest.approx(c * fit.se_theta, rel=1e-6)
    assert scaled.vc_hat.tau2 == pytest.approx(c**2 * fit.vc_hat.tau2, rel=1e-4, abs=1e-8)
    assert np.allclose(scaled.vc_hat.sigma2, c**2 * fit.vc_hat.sigma2, rtol=1e-6)
    assert t_statistic(scaled) == pytest.approx(t_statistic(fit), rel=1e-8)


def test_offset_identity_field_for_field():
    ds = simulate_ipd(48, theta=1.0)
    theta0 = 0.65
    via_offset = fit_reml(ds, theta_offset=theta0)
    via_shift = fit_reml(ds.with_outcome(ds.y - theta0 * ds.z_float))
    assert via_offset.theta_hat == via_shift.theta_hat
    assert via_offset.se_theta == via_shift.se_theta
    assert np.array_equal(via_offset.beta_hat, via_shift.beta_hat)
    assert via_offset.vc_hat.tau2 == via_shift.vc_hat.tau2
    assert np.array_equal(via_offset.vc_hat.sigma2, via_shift.vc_hat.sigma2)
    assert via_offset.restricted_loglik == via_shift.restricted_loglik


def test_boundary_tau2_reported_as_zero():
    # identical study-level effects: heterogeneity floor binds
    rng = np.random.default_rng(77)
    study, y, y0, z = [], [], [], []
    for i in range(4):
        zi = rng.binomial(1, 0.6, 40)
        while zi.min() == zi.max():
            zi = rng.binomial(1, 0.6, 40)
        y0i = rng.normal(4, 1, 40)
        yi = 1.0 + 0.5 * y0i + 0.8 * zi + rng.normal(0, 1, 40)
        study += [i] * 40
        y += list(yi)
        y0 += list(y0i)
        z += list(zi)
    fit = fit_reml(IpdDataset.from_arrays(study, y, y0, z))
    assert fit.vc_hat.tau2 == 0.0
    assert math.isfinite(fit.restricted_loglik)
    assert fit.se_theta > 0


def test_se_matches_fixed_cov_and_cov_psd():
    ds = simulate_ipd(49)
    fit = fit_reml(ds)
    assert fit.se_theta**2 == pytest.approx(fit.fixed_cov[-1, -1], rel=1e-12)
    eigs = np.linalg.eigvalsh(fit.fixed_cov)
    assert np.all(eigs > -1e-12)
    assert np.allclose(fit.fixed_cov, fit.fixed_cov.T)


def test_null_constrained_fit():
    ds = simulate_ipd(50)
    nf = fit_reml(ds, include_treatment=False)
    assert nf.null_constrained
    assert nf.theta_hat is None and nf.se_theta is None
    assert nf.beta_hat.shape == (2 * ds.k,)
    assert nf.fixed_cov.shape == (2 * ds.k, 2 * ds.k)
    with pytest.raises(ValueError):
        t_statistic(nf)
    # null criterion at the null optimum beats the full fit's components
    full = fit_reml(ds)
    vc_full = full.vc_hat
    assert nf.restricted_loglik >= restricted_log_likelihood(vc_full, ds, include_treatment=False) - 1e-9


def test_unequal_variances_fit():
    ds = simulate_ipd(51, k=4, sigma=[0.5, 1.0, 1.5, 2.0], size_lo=60, size_hi=120)
    fit = fit_reml(ds, equal_variances=False)
    assert not fit.equal_variances
    assert fit.vc_hat.sigma2.shape == (4,)
    # estimated residual variances track the generating spread
    assert fit.vc_hat.sigma2[0] < fit.vc_hat.sigma2[3]
    assert fit.vc_info_inv.shape == (5, 5)
    # unequal-variance optimum cannot be worse than the equal-variance one
    eq = fit_reml(ds, equal_variances=True)
    assert fit.restricted_loglik >= eq.restricted_loglik - 1e-7


def test_unequal_variance_fit_beats_3d_grid():
    import itertools

    ds = simulate_ipd(345, k=2, size_lo=8, size_hi=8, sigma=[0.6, 1.6], tau=0.7)
    fit = fit_reml(ds, equal_variances=False)
    best = -math.inf
    grid = np.linspace(-6, 3, 46)
    for lt, l1, l2 in itertools.product(grid, grid, grid):
        vc = VarianceComponents(math.exp(lt), np.array([math.exp(l1), math.exp(l2)]))
        best = max(best, restricted_log_likelihood(vc, ds))
    assert fit.restricted_loglik >= best - 1e-4


def test_constant_baseline_not_identifiable():
    ds = IpdDataset.from_arrays(
        ["a"] * 6 + ["b"] * 6,
        np.arange(12.0),
        [1.0] * 6 + list(np.arange(6.0)),  # study a: constant baseline
        [1, 0, 1, 0, 1, 0] * 2,
    )
    with pytest.raises(NonIdentifiableError):
        fit_reml(ds)


def test_t_statistic_ratio():
    ds = simulate_ipd(52)
    fit = fit_reml(ds)
    assert t_statistic(fit) == fit.theta_hat / fit.se_theta


def test_agreement_with_statsmodels_mixedlm():
    # independent reference: the same model is a MixedLM with a single
    # random slope on the treatment indicator (no random intercept)
    sm = pytest.importorskip("statsmodels.api")
    import warnings

    from ipdperm.model import build_design

    seeds = [1002, 1004, 1005, 1009, 1010, 1012, 1014, 1016, 1017, 1018]
    compared = 0
    for seed in seeds:
        ds = simulate_ipd(seed, k=4, theta=1.0, tau=0.5)
        fit = fit_reml(ds)
        design = build_design(ds)
        exog = np.column_stack([design.X, design.treatment_column])
        best = None
        for method in ("lbfgs", "bfgs"):
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                try:
                    res = sm.MixedLM(
                        ds.y, exog, groups=ds.study_index,
                        exog_re=ds.z_float.reshape(-1, 1),
                    ).fit(reml=True, method=method, maxiter=1000)
                except Exception:
                    continue
                # MixedLM without a random intercept is fragile; keep only
                # cleanly converged reference fits
                if (np.all(np.isfinite(res.bse_fe)) and res.bse_fe[-1] < 100
                        and np.abs(res.fe_params).max() > 1e-8):
                    if best is None or res.llf > best.llf:
                        best = res
        if best is None:
            continue
        tau2_sm = float(np.asarray(best.cov_re)[0, 0])
        assert abs(fit.theta_hat - best.fe_params[-1]) < 1e-4
        assert abs(fit.se_theta - best.bse_fe[-1]) < 5e-3
        assert abs(fit.vc_hat.tau2 - tau2_sm) < 1e-3
        assert abs(fit.vc_hat.sigma2[0] - best.scale) < 1e-4
        # our optimum is never worse under our criterion
        at_theirs = restricted_log_likelihood(
            VarianceComponents.equal(max(tau2_sm, 0.0), best.scale, ds.k), ds
        )
        assert fit.restricted_loglik >= at_theirs - 1e-6
        compared += 1
    assert compared >= 8
