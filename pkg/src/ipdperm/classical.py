"""Wald-normal, Satterthwaite, and Kenward-Roger inference for theta.

Satterthwaite's degrees of freedom moment-match the scaled chi-square
approximation of Var(theta_hat):

    df_S = 2 [se(theta_hat)^2]^2 / (g^T W g),

where g is the gradient of Var(theta_hat) with respect to the variance
components (central finite differences) and W the asymptotic covariance of
the component estimates.  Kenward-Roger inflates the fixed-effects
covariance, Phi_A = Phi + 2 Lambda, with Lambda assembled from first
derivatives of Sigma only (Sigma is linear in tau^2 and sigma_i^2, so
second-derivative terms vanish); its degrees of freedom equal df_S for this
one-dimensional contrast.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats import t as _student_t

from .errors import DfUndefinedError, KrAdjustmentError
from .reml import t_statistic, var_theta_at

NORMAL = "normal"
SATTERTHWAITE = "satterthwaite"
KENWARD_ROGER = "kenward_roger"
PERMUTATION = "permutation"
PERMUTATION_SEARCH = "permutation_search"

_GRAD_REL_STEP = 1e-5


@dataclass(frozen=True)
class InferenceResult:
    """One method's test and confidence interval for the treatment effect."""

    method: str
    t_value: float
    df: float
    se_used: float
    p_value: float
    ci_lower: float
    ci_upper: float
    alpha: float

    def __post_init__(self):
        if self.ci_lower > self.ci_upper:
            raise ValueError("ci_lower must not exceed ci_upper")
        if not (0.0 <= self.p_value <= 1.0):
            raise ValueError(f"p-value out of range: {self.p_value}")

    @property
    def ci_length(self):
        return self.ci_upper - self.ci_lower

    def to_dict(self):
        return {
            "method": self.method,
            "t_value": self.t_value,
            "df": None if math.isinf(self.df) else self.df,
            "se_used": self.se_used,
            "p_value": self.p_value,
            "ci_lower": self.ci_lower,
            "ci_upper": self.ci_upper,
            "alpha": self.alpha,
        }


def wald_normal(fit, alpha=0.05):
    """theta_hat +/- z_{1-alpha/2} se(theta_hat), p from the standard normal."""
    t_val = t_statistic(fit)
    z = _norm.ppf(1.0 - alpha / 2.0)
    half = z * fit.se_theta
    return InferenceResult(
        method=NORMAL,
        t_value=t_val,
        df=math.inf,
        se_used=fit.se_theta,
        p_value=min(2.0 * _norm.sf(abs(t_val)), 1.0),
        ci_lower=fit.theta_hat - half,
        ci_upper=fit.theta_hat + half,
        alpha=alpha,
    )


def _var_theta_gradient(fit):
    comps = fit.vc_components
    floor = 1e-3 * float(np.mean(comps[1:]))
    g = np.empty(comps.size)
    for j in range(comps.size):
        h = _GRAD_REL_STEP * max(comps[j], floor)
        cp = comps.copy()
        cp[j] = comps[j] + h
        vp = var_theta_at(fit, cp)
        cp[j] = comps[j] - h
        vm = var_theta_at(fit, cp)
        if math.isfinite(vp) and math.isfinite(vm):
            g[j] = (vp - vm) / (2.0 * h)
        elif math.isfinite(vp):
            g[j] = (vp - fit.se_theta**2) / h
        elif math.isfinite(vm):
            g[j] = (fit.se_theta**2 - vm) / h
        else:
            g[j] = np.nan
    return g


def df_from_moments(var_theta, grad, vc_cov):
    """Moment-matched degrees of freedom 2 Var^2 / (g^T W g)."""
    grad = np.asarray(grad, dtype=np.float64)
    vc_cov = np.asarray(vc_cov, dtype=np.float64)
    denom = float(grad @ vc_cov @ grad)
    if not math.isfinite(denom) or denom <= 0.0:
        raise DfUndefinedError(
            f"Satterthwaite denominator is not positive ({denom}); "
            "variance-component information is degenerate"
        )
    return 2.0 * var_theta**2 / denom


def satterthwaite_df(fit):
    """Satterthwaite degrees of freedom for the treatment-effect t ratio."""
    if fit.null_constrained:
        raise ValueError("degrees of freedom require a fit with the treatment effect")
    grad = _var_theta_gradient(fit)
    if not np.all(np.isfinite(grad)):
        raise DfUndefinedError("Var(theta_hat) gradient could not be evaluated")
    return df_from_moments(fit.se_theta**2, grad, fit.vc_info_inv)


def _t_result(method, fit, df, se, alpha):
    t_val = fit.theta_hat / se
    half = _student_t.ppf(1.0 - alpha / 2.0, df) * se
    return InferenceResult(
        method=method,
        t_value=t_val,
        df=df,
        se_used=se,
        p_value=min(2.0 * _student_t.sf(abs(t_val), df), 1.0),
        ci_lower=fit.theta_hat - half,
        ci_upper=fit.theta_hat + half,
        alpha=alpha,
    )


def satterthwaite_ci(fit, alpha=0.05):
    """theta_hat +/- t_{df_S, 1-alpha/2} se(theta_hat)."""
    return _t_result(SATTERTHWAITE, fit, satterthwaite_df(fit), fit.se_theta, alpha)


def _kr_adjusted_cov(fit):
    """Phi_A = Phi + 2 Phi { sum_cd W_cd (Q_cd - P_c Phi P_d) } Phi.

    All study blocks are handled matrix-free via the Sherman-Morrison form
    of Sigma_i^{-1}; derivative blocks are z z^T (tau2) and identities
    (residual variances).
    """
    dataset = fit.dataset
    k = dataset.k
    q = 2 * k + 1
    tau2 = fit.vc_hat.tau2
    sigma2 = fit.vc_hat.sigma2
    phi_mat = fit.fixed_cov
    n_comp = 2 if fit.equal_variances else k + 1

    p_mats = [np.zeros((q, q)) for _ in range(n_comp)]
    q_mats = [[np.zeros((q, q)) for _ in range(n_comp)] for _ in range(n_comp)]

    for i in range(k):
        sl = slice(dataset.starts[i], dataset.starts[i + 1])
        zi = dataset.z_float[sl]
        di = np.column_stack([np.ones(zi.size), dataset.y0[sl], zi])
        m_i = zi.sum()
        d_i = sigma2[i] + tau2 * m_i
        a_i = 1.0 / sigma2[i]
        b_i = tau2 / (sigma2[i] * d_i)

        def sigma_inv(x):
            return a_i * x - b_i * np.outer(zi, zi @ x) if x.ndim == 2 else a_i * x - b_i * zi * (zi @ x)

        t_i = sigma_inv(di)                      # T = Sigma_i^{-1} D_i, (n_i, 3)
        u_i = sigma_inv(zi)                      # Sigma_i^{-1} z_i, (n_i,)
        g_i = t_i.T @ zi                         # T^T z, (3,)
        idx = np.array([i, k + i, 2 * k])
        sig_idx = 1 if fit.equal_variances else 1 + i

        # P_c = T^T Sigma_dot_c T (overall sign cancels inside P Phi P)
        p_mats[0][np.ix_(idx, idx)] -= np.outer(g_i, g_i)
        p_mats[sig_idx][np.ix_(idx, idx)] -= t_i.T @ t_i

        # Q_cd = T^T Sigma_dot_c Sigma^{-1} Sigma_dot_d T
        ztsz = float(zi @ u_i)                   # z^T Sigma^{-1} z
        q_tt = ztsz * np.outer(g_i, g_i)
        q_ts = np.outer(g_i, u_i @ t_i)          # T^T zz^T Sigma^{-1} T
        q_ss = t_i.T @ sigma_inv(t_i)            # T^T Sigma^{-1} T
        q_mats[0][0][np.ix_(idx, idx)] += q_tt
        q_mats[0][sig_idx][np.ix_(idx, idx)] += q_ts
        q_mats[sig_idx][0][np.ix_(idx, idx)] += q_ts.T
        q_mats[sig_idx][sig_idx][np.ix_(idx, idx)] += q_ss

    w = fit.vc_info_inv
    core = np.zeros((q, q))
    for c in range(n_comp):
        for d in range(n_comp):
            core += w[c, d] * (q_mats[c][d] - p_mats[c] @ phi_mat @ p_mats[d])
    lam = phi_mat @ core @ phi_mat
    return phi_mat + 2.0 * lam, lam


def kenward_roger(fit, alpha=0.05):
    """Kenward-Roger adjusted test and confidence interval.

    Uses the adjusted standard error from Phi_A and degrees of freedom equal
    to the Satterthwaite value.  Raises KrAdjustmentError when the adjusted
    (theta, theta) entry is not positive; callers may fall back to the
    Satterthwaite interval with a warning.
    """
    if fit.null_constrained:
        raise ValueError("Kenward-Roger requires a fit with the treatment effect")
    df = satterthwaite_df(fit)
    phi_a, _ = _kr_adjusted_cov(fit)
    v_adj = float(phi_a[-1, -1])
    if not math.isfinite(v_adj) or v_adj <= 0.0:
        raise KrAdjustmentError(
            f"adjusted covariance has non-positive (theta, theta) entry: {v_adj}"
        )
    return _t_result(KENWARD_ROGER, fit, df, math.sqrt(v_adj), alpha)
