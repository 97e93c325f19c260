"""Restricted maximum likelihood estimation of the treatment-effect model.

The criterion maximized is, up to an additive constant,

    l_R(tau^2, sigma^2) = -1/2 [ log|Sigma| + log|C^T Sigma^{-1} C|
                                 + r^T Sigma^{-1} r ],

where C is the fixed-effects design (stratified intercepts and baseline
slopes, plus the pooled treatment column when the treatment effect is
included), and r is the generalized-least-squares residual at the profiled
coefficient estimate.  Coefficients are always profiled out by GLS; the
residual scale is profiled analytically; the remaining search runs over the
log heterogeneity ratio (one-dimensional for equal residual variances,
quasi-Newton over log ratios otherwise).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

from . import _kernels as K
from .errors import ConvergenceError, NonIdentifiableError
from .model import IpdDataset, VarianceComponents

# A fitted log-ratio this close to the floor is reported as tau2 = 0.
_FLOOR_TOL = 1e-6
_HESS_REL_STEP = 1e-4
_MAX_ITER = 500


@dataclass(frozen=True)
class FittedModel:
    """REML estimates and the information needed by downstream inference.

    `fixed_cov` is the asymptotic covariance of (beta_hat, theta_hat) in the
    column order (b0_1..b0_k, b1_1..b1_k, theta); for a null-constrained fit
    the theta row/column is absent.  `vc_info_inv` is the asymptotic
    covariance of the variance-component estimates, in the reduced
    parameterization (tau2, sigma2) for equal variances and
    (tau2, sigma2_1..sigma2_k) otherwise.
    """

    theta_hat: float | None
    beta_hat: np.ndarray
    vc_hat: VarianceComponents
    fixed_cov: np.ndarray
    se_theta: float | None
    vc_info_inv: np.ndarray
    restricted_loglik: float
    converged: bool
    null_constrained: bool
    equal_variances: bool
    theta_offset: float
    dataset: IpdDataset = field(repr=False)

    @property
    def vc_components(self):
        """Variance components in the reduced space matching vc_info_inv."""
        if self.equal_variances:
            return np.array([self.vc_hat.tau2, float(self.vc_hat.sigma2[0])])
        return np.concatenate(([self.vc_hat.tau2], self.vc_hat.sigma2))


def _expand_components(comps, equal, k):
    tau2 = float(comps[0])
    if equal:
        sigma2 = np.full(k, float(comps[1]))
    else:
        sigma2 = np.asarray(comps[1:], dtype=np.float64)
    return tau2, sigma2


def _response_crossprods(dataset, y=None):
    y = dataset.y if y is None else np.ascontiguousarray(y, dtype=np.float64)
    return K.response_crossprods(dataset.y0, dataset.z_float, y, dataset.starts)


def restricted_log_likelihood(vc, dataset, include_treatment=True):
    """REML criterion at the given variance components.

    Raises NonIdentifiableError when C^T Sigma^{-1} C is singular (for
    example a study with constant baseline values).
    """
    dxy = _response_crossprods(dataset)
    val = K.criterion_natural(
        dataset.design_crossprods, dxy, float(vc.tau2), np.asarray(vc.sigma2, dtype=np.float64),
        bool(include_treatment),
    )
    if not math.isfinite(val):
        raise NonIdentifiableError(
            "restricted likelihood is degenerate at these components "
            "(singular fixed-effects information)"
        )
    return float(val)


def _assemble_normal_matrix(dataset, dxy, tau2, sigma2, include_treatment):
    """Dense C^T Sigma^{-1} C and C^T Sigma^{-1} y in the global column order."""
    k = dataset.k
    q = 2 * k + 1 if include_treatment else 2 * k
    dxx = dataset.design_crossprods
    m_mat = np.zeros((q, q))
    v = np.zeros(q)
    for i in range(k):
        s2 = sigma2[i]
        m_i = dxx[i, 2, 2]
        d = s2 + tau2 * m_i
        a = 1.0 / s2
        b = tau2 / (s2 * d)
        zcol = dxx[i, :, 2]
        blk = a * dxx[i] - b * np.outer(zcol, zcol)
        vi = a * dxy[i, :3] - b * zcol * dxy[i, 2]
        if include_treatment:
            idx = np.array([i, k + i, 2 * k])
            m_mat[np.ix_(idx, idx)] += blk
            v[idx] += vi
        else:
            idx = np.array([i, k + i])
            m_mat[np.ix_(idx, idx)] += blk[:2, :2]
            v[idx] += vi[:2]
    return m_mat, v


def _vc_information_inverse(dataset, dxy, comps, equal, include_treatment):
    """Covariance of the variance-component estimates from the numerically
    differentiated Hessian of the criterion.

    Steps are relative (equivalent to stepping in log space at interior
    optima) with an absolute floor so the tau2 = 0 boundary stays
    differentiable.
    """
    dxx = dataset.design_crossprods
    k = dataset.k

    def crit(c):
        tau2, sigma2 = _expand_components(c, equal, k)
        return K.criterion_natural(dxx, dxy, tau2, sigma2, include_treatment)

    p = len(comps)
    floor = 1e-3 * float(np.mean(comps[1:]))
    steps = _HESS_REL_STEP * np.maximum(comps, floor)
    hess = np.empty((p, p))
    f0 = crit(comps)

    def _entry(a, b):
        for scale_try in (1.0, 0.1, 0.01):
            ha, hb = steps[a] * scale_try, steps[b] * scale_try
            if a == b:
                cp = comps.copy()
                cp[a] += ha
                fp = crit(cp)
                cp[a] = comps[a] - ha
                fm = crit(cp)
                val = (fp - 2.0 * f0 + fm) / ha**2
            else:
                vals = []
                for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                    cp = comps.copy()
                    cp[a] += sa * ha
                    cp[b] += sb * hb
                    vals.append(crit(cp))
                val = (vals[0] - vals[1] - vals[2] + vals[3]) / (4.0 * ha * hb)
            if math.isfinite(val):
                return val
        return np.nan

    for a in range(p):
        for b in range(a, p):
            hess[a, b] = hess[b, a] = _entry(a, b)

    neg_h = -hess
    if not np.all(np.isfinite(neg_h)):
        return np.full((p, p), np.nan)
    # At a tau2 = 0 boundary optimum the criterion is one-sided in tau2 and
    # the full observed information is typically indefinite; the pinned
    # component carries no sampling variability, so it is dropped and the
    # residual-variance block inverted alone (zero tau2 row/column).
    if comps[0] == 0.0:
        cov = np.zeros((p, p))
        try:
            cov[1:, 1:] = np.linalg.inv(neg_h[1:, 1:])
        except np.linalg.LinAlgError:
            cov[1:, 1:] = np.linalg.pinv(neg_h[1:, 1:])
        return cov
    try:
        cov = np.linalg.inv(neg_h)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(neg_h)
    return cov


def fit_reml(dataset, equal_variances=True, include_treatment=True, theta_offset=0.0):
    """Fit the model by REML.

    Args:
        dataset: canonical IpdDataset.
        equal_variances: constrain sigma_i^2 equal across studies (the
            default, matching the simulation fits) or estimate per study.
        include_treatment: include the pooled treatment column; False gives
            the null-constrained fit used to build permutation residuals.
        theta_offset: subtract theta_offset * z from the outcomes before
            fitting (testing theta = theta_0 reduces to theta = 0).

    Returns:
        FittedModel.  tau2 = 0 is reported exactly when the heterogeneity
        floor binds; no epsilon clamping is applied.
    """
    k = dataset.k
    q = 2 * k + (1 if include_treatment else 0)
    n_minus_q = dataset.n - q
    if n_minus_q <= 0:
        raise NonIdentifiableError(f"need more than {q} observations, got {dataset.n}")
    y = dataset.y
    if theta_offset != 0.0:
        y = y - theta_offset * dataset.z_float
    dxy = _response_crossprods(dataset, y)
    dxx = dataset.design_crossprods

    ratios = np.ones(k)
    log_phi = K.fit_ratio_1d(dxx, dxy, ratios, include_treatment, n_minus_q)
    converged = True

    if not equal_variances and k > 1:
        x0 = np.zeros(k)
        x0[0] = log_phi

        def objective(x):
            r = np.empty(k)
            r[0] = 1.0
            r[1:] = np.exp(x[1:])
            crit, _ = K.profiled_criterion(
                dxx, dxy, math.exp(x[0]), r, include_treatment, n_minus_q
            )
            return 1e30 if not math.isfinite(crit) else -crit

        bounds = [(K.LOG_PHI_MIN, K.LOG_PHI_MAX)] + [(-18.0, 18.0)] * (k - 1)
        res = scipy.optimize.minimize(
            objective, x0, method="L-BFGS-B", bounds=bounds,
            options={"maxiter": _MAX_ITER, "ftol": 1e-12, "gtol": 1e-9},
        )
        if not res.success:
            raise ConvergenceError(
                f"REML optimizer did not converge: {res.message}",
                best={"x": res.x, "criterion": -res.fun},
            )
        log_phi = float(res.x[0])
        ratios = np.concatenate(([1.0], np.exp(res.x[1:])))

    # The floor binds when the criterion cannot distinguish the found point
    # from tau2 = 0 within the convergence tolerance; report 0 exactly then.
    phi = math.exp(log_phi)
    crit_opt, _ = K.profiled_criterion(dxx, dxy, phi, ratios, include_treatment, n_minus_q)
    crit_zero, _ = K.profiled_criterion(dxx, dxy, 0.0, ratios, include_treatment, n_minus_q)
    if log_phi <= K.LOG_PHI_MIN + _FLOOR_TOL or crit_zero >= crit_opt - 1e-10:
        phi = 0.0
    ok, _, _, scale, _ = K.gls_estimate(dxx, dxy, phi, ratios, include_treatment, n_minus_q)
    if not ok:
        raise NonIdentifiableError("GLS solve failed at the REML optimum")

    tau2_hat = phi * scale
    sigma2_hat = scale * ratios
    vc_hat = VarianceComponents(tau2=tau2_hat, sigma2=sigma2_hat)

    m_mat, v = _assemble_normal_matrix(dataset, dxy, tau2_hat, sigma2_hat, include_treatment)
    try:
        fixed_cov = np.linalg.inv(m_mat)
        coef = fixed_cov @ v
    except np.linalg.LinAlgError:
        raise NonIdentifiableError("fixed-effects information matrix is singular") from None
    fixed_cov = 0.5 * (fixed_cov + fixed_cov.T)

    if include_treatment:
        theta_hat = float(coef[-1])
        beta_hat = coef[:-1]
        se_theta = math.sqrt(fixed_cov[-1, -1])
    else:
        theta_hat = None
        beta_hat = coef
        se_theta = None

    loglik = float(K.criterion_natural(dxx, dxy, tau2_hat, sigma2_hat, include_treatment))
    comps = (
        np.array([tau2_hat, float(sigma2_hat[0])])
        if equal_variances or k == 1
        else np.concatenate(([tau2_hat], sigma2_hat))
    )
    vc_info_inv = _vc_information_inverse(dataset, dxy, comps, equal_variances or k == 1, include_treatment)

    return FittedModel(
        theta_hat=theta_hat,
        beta_hat=beta_hat,
        vc_hat=vc_hat,
        fixed_cov=fixed_cov,
        se_theta=se_theta,
        vc_info_inv=vc_info_inv,
        restricted_loglik=loglik,
        converged=converged,
        null_constrained=not include_treatment,
        equal_variances=bool(equal_variances or k == 1),
        theta_offset=float(theta_offset),
        dataset=dataset,
    )


def var_theta_at(fit, comps):
    """Var(theta_hat) as a function of the (reduced) variance components.

    Evaluates the (theta, theta) entry of (C^T Sigma(vc)^{-1} C)^{-1}; used
    by the Satterthwaite delta method.
    """
    dataset = fit.dataset
    tau2, sigma2 = _expand_components(comps, fit.equal_variances, dataset.k)
    dxy = _response_crossprods(dataset, _offset_outcome(fit))
    ok, _, _, _, _, var_theta = K.gls_core(
        dataset.design_crossprods, dxy, tau2, sigma2, True
    )
    if not ok or var_theta <= 0.0:
        return np.nan
    return float(var_theta)


def _offset_outcome(fit):
    if fit.theta_offset != 0.0:
        return fit.dataset.y - fit.theta_offset * fit.dataset.z_float
    return fit.dataset.y


def t_statistic(fit):
    """t = theta_hat / se(theta_hat); requires a converged full-model fit."""
    if fit.null_constrained or fit.theta_hat is None:
        raise ValueError("t statistic requires a fit that includes the treatment effect")
    if not fit.converged:
        raise ValueError("t statistic requires a converged fit")
    return fit.theta_hat / fit.se_theta


__all__ = [
    "FittedModel",
    "fit_reml",
    "restricted_log_likelihood",
    "t_statistic",
    "var_theta_at",
]
