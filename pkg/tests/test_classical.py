import math
from dataclasses import replace

import numpy as np
import pytest
from scipy.stats import t as student_t

from ipdperm.classical import (
    df_from_moments,
    kenward_roger,
    satterthwaite_ci,
    satterthwaite_df,
    wald_normal,
    _kr_adjusted_cov,
)
from ipdperm.errors import DfUndefinedError
from ipdperm.model import IpdDataset
from ipdperm.reml import fit_reml
from _oracles import dense_kr_adjusted_cov, simulate_ipd


@pytest.fixture(scope="module")
def fit():
    return fit_reml(simulate_ipd(7, theta=1.0, tau=0.5))


def test_wald_zero_t_gives_p_one():
    f = fit_reml(simulate_ipd(8))
    f0 = replace(f, theta_hat=0.0)
    res = wald_normal(f0, 0.05)
    assert res.p_value == 1.0
    assert res.ci_lower == pytest.approx(-res.ci_upper + 2 * f0.theta_hat, abs=1e-12)


def test_wald_boundary_quantile(fit):
    # t exactly at the 97.5% normal quantile: p sits at alpha
    f = replace(fit, theta_hat=1.959964 * fit.se_theta)
    res = wald_normal(f, 0.05)
    assert res.p_value == pytest.approx(0.05, abs=1e-6)


def test_wald_hand_interval(fit):
    f = replace(fit, theta_hat=1.0, se_theta=0.4)
    res = wald_normal(f, 0.05)
    assert round(res.ci_lower, 3) == 0.216
    assert round(res.ci_upper, 3) == 1.784
    assert res.df == math.inf


def test_satterthwaite_interval_halfwidth_df3():
    # t quantile at df = 3 is 3.182446; check through the public interval
    # by forcing the df via moments: one component, Var = c * s2
    n_minus_q = 3  # residual chi-square df
    s2 = 1.7
    c = 0.25
    df = df_from_moments(c * s2, np.array([c]), np.array([[2 * s2**2 / n_minus_q]]))
    assert df == pytest.approx(n_minus_q, rel=1e-12)
    assert student_t.ppf(0.975, 3.0) == pytest.approx(3.182446, abs=1e-6)


def test_satterthwaite_single_component_residual_df():
    # moment-matching identity: with Var(theta) = c * sigma2 exactly and
    # Var(sigma2_hat) = 2 sigma2^2 / m, the matched df equals m
    for m in (5, 17, 96):
        df = df_from_moments(0.3 * 2.0, np.array([0.3]), np.array([[2 * 4.0 / m]]))
        assert df == pytest.approx(m, rel=1e-12)


def test_satterthwaite_df_positive_on_fits():
    for seed in range(6):
        f = fit_reml(simulate_ipd(400 + seed, tau=0.4))
        assert satterthwaite_df(f) > 0


def test_satterthwaite_reduces_to_normal_when_info_vanishes(fit):
    frozen = replace(fit, vc_info_inv=1e-18 * np.eye(2))
    s = satterthwaite_ci(frozen, 0.05)
    w = wald_normal(frozen, 0.05)
    assert s.ci_lower == pytest.approx(w.ci_lower, abs=1e-6)
    assert s.ci_upper == pytest.approx(w.ci_upper, abs=1e-6)


def test_satterthwaite_contains_wald(fit):
    for seed in range(5):
        f = fit_reml(simulate_ipd(500 + seed, tau=0.6))
        s = satterthwaite_ci(f, 0.05)
        w = wald_normal(f, 0.05)
        assert s.ci_lower <= w.ci_lower and s.ci_upper >= w.ci_upper


def test_df_denominator_error():
    with pytest.raises(DfUndefinedError):
        df_from_moments(1.0, np.array([1.0]), np.array([[-1.0]]))


def test_kr_df_identity_exact(fit):
    assert kenward_roger(fit).df == satterthwaite_df(fit)


def test_kr_reduces_to_satterthwaite_when_info_vanishes(fit):
    frozen = replace(fit, vc_info_inv=1e-18 * np.eye(2))
    kr = kenward_roger(frozen, 0.05)
    assert kr.se_used == pytest.approx(fit.se_theta, rel=1e-9)
    s = satterthwaite_ci(frozen, 0.05)
    assert kr.ci_lower == pytest.approx(s.ci_lower, rel=1e-9)
    assert kr.ci_upper == pytest.approx(s.ci_upper, rel=1e-9)


def test_kr_matches_dense_oracle_equal(fit):
    mine, _ = _kr_adjusted_cov(fit)
    oracle = dense_kr_adjusted_cov(fit)
    assert np.max(np.abs(mine - oracle)) <= 1e-10 * max(1.0, np.max(np.abs(oracle)))


def test_kr_matches_dense_oracle_unequal():
    ds = simulate_ipd(9, k=3, sigma=[0.7, 1.0, 1.6], size_lo=40, size_hi=80)
    f = fit_reml(ds, equal_variances=False)
    mine, _ = _kr_adjusted_cov(f)
    oracle = dense_kr_adjusted_cov(f)
    assert np.max(np.abs(mine - oracle)) <= 1e-10 * max(1.0, np.max(np.abs(oracle)))


def test_kr_inflation_entry_reported(fit):
    # when the correction at (theta, theta) is nonnegative, CI_KR >= CI_S
    _, lam = _kr_adjusted_cov(fit)
    kr = kenward_roger(fit, 0.05)
    s = satterthwaite_ci(fit, 0.05)
    if lam[-1, -1] >= 0:
        assert kr.ci_length >= s.ci_length - 1e-12
    else:  # pragma: no cover - report rather than assume
        pytest.fail(f"negative KR correction entry: {lam[-1, -1]}")


def test_duality_p_vs_ci():
    # p <= alpha iff 0 outside the open interval, for each t-based method
    for seed in range(8):
        f = fit_reml(simulate_ipd(600 + seed, theta=0.4, tau=0.5))
        for method in (wald_normal, satterthwaite_ci, kenward_roger):
            res = method(f, 0.05)
            rejects = res.p_value <= 0.05 - 1e-9
            excludes = not (res.ci_lower < 0.0 < res.ci_upper)
            if abs(res.p_value - 0.05) > 1e-9:
                assert rejects == excludes, (method.__name__, res)


def test_p_values_scale_invariant():
    ds = simulate_ipd(10, theta=0.8, tau=0.4)
    f1 = fit_reml(ds)
    f2 = fit_reml(IpdDataset.from_arrays(ds.study_index, 3.0 * ds.y, 3.0 * ds.y0, ds.z))
    for method in (wald_normal, satterthwaite_ci, kenward_roger):
        assert method(f1, 0.05).p_value == pytest.approx(method(f2, 0.05).p_value, rel=1e-5)


def test_boundary_fit_df_equals_residual_df():
    # with tau2 pinned at zero the information reduces to the residual
    # variance alone, so df matches the n - q residual degrees of freedom
    rng = np.random.default_rng(31)
    study, y, y0, z = [], [], [], []
    for i in range(4):
        zi = rng.binomial(1, 0.6, 30)
        while zi.min() == zi.max():
            zi = rng.binomial(1, 0.6, 30)
        y0i = rng.normal(4, 1, 30)
        yi = 0.4 + 0.9 * y0i + 0.5 * zi + rng.normal(0, 1, 30)
        study += [i] * 30
        y += list(yi)
        y0 += list(y0i)
        z += list(zi)
    f = fit_reml(IpdDataset.from_arrays(study, y, y0, z))
    if f.vc_hat.tau2 == 0.0:
        assert satterthwaite_df(f) == pytest.approx(120 - 9, rel=0.02)
