"""Array-level numerical core for REML fitting under the block covariance.

Within study i the marginal covariance block is

    Sigma_i = sigma_i^2 I + tau^2 z_i z_i^T,

a rank-one update of a scaled identity, so with d_i = sigma_i^2 + tau^2 m_i
(m_i = number of treated patients) Sherman-Morrison gives

    Sigma_i^{-1} = (1/sigma_i^2) I - b_i z_i z_i^T,
    b_i = tau^2 / (sigma_i^2 d_i),
    log|Sigma_i| = (n_i - 1) log sigma_i^2 + log d_i.

Every quantity in the restricted likelihood

    crit = -1/2 [ log|Sigma| + log|C^T Sigma^{-1} C| + r^T Sigma^{-1} r ]

then reduces to per-study cross-products of the 3-column design [1, y0, z]
with the response.  The fixed-effects normal matrix C^T Sigma^{-1} C is
2x2-block-diagonal (intercept/slope per study) bordered by the treatment
column, so determinants and solves cost O(k) scalars via the bordering
identity; no matrix larger than 2x2 is ever formed in the hot path.

The residual scale is profiled out analytically: with Sigma = s * V(phi),
phi = tau^2 / sigma_1^2, the REML-optimal scale is s = r^T V^{-1} r / (n - q),
leaving a one-dimensional search over log phi for equal residual variances.

Functions here accept only plain ndarrays/scalars and are JIT-compiled.
"""

import math

import numpy as np
from numba import njit

# Bounds for log(tau^2 / sigma_1^2); the lower bound acts as the tau^2 = 0
# floor (a fit ending there is reported as tau2 = 0 exactly).
LOG_PHI_MIN = math.log(1e-12)
LOG_PHI_MAX = math.log(1e12)
N_SCAN = 45
GOLDEN_XTOL = 1e-8

_INVALID = -math.inf


@njit(cache=True)
def response_crossprods(y0, zf, y, starts):
    """Per-study [sum y, sum y0*y, sum z*y, sum y^2], shape (k, 4)."""
    k = starts.size - 1
    out = np.empty((k, 4))
    for i in range(k):
        s0 = 0.0
        s1 = 0.0
        s2 = 0.0
        s3 = 0.0
        for r in range(starts[i], starts[i + 1]):
            yr = y[r]
            s0 += yr
            s1 += y0[r] * yr
            s2 += zf[r] * yr
            s3 += yr * yr
        out[i, 0] = s0
        out[i, 1] = s1
        out[i, 2] = s2
        out[i, 3] = s3
    return out


@njit(cache=True)
def gls_core(dxx, dxy, tau2, sigma2, use_trt):
    """Whitened-GLS accumulators at fixed variance components.

    Args:
        dxx: (k, 3, 3) per-study D^T D for D = [1, y0, z].
        dxy: (k, 4) per-study response cross-products.
        tau2: heterogeneity variance (may be slightly negative during
            finite differencing; validity is guarded through d_i > 0).
        sigma2: (k,) residual variances.
        use_trt: whether the treatment column is in the fixed design.

    Returns:
        (ok, ld_sigma, ld_m, quad, theta, var_theta) where ld_sigma is
        log|Sigma|, ld_m is log|C^T Sigma^{-1} C|, quad is the GLS residual
        quadratic form r^T Sigma^{-1} r, and var_theta is the (theta, theta)
        entry of (C^T Sigma^{-1} C)^{-1} (0.0 when use_trt is False).
    """
    k = dxx.shape[0]
    ld_sigma = 0.0
    ld_g = 0.0
    h_g_h = 0.0
    h_g_v = 0.0
    v_g_v = 0.0
    w_acc = 0.0
    vt_acc = 0.0
    s_acc = 0.0
    for i in range(k):
        s2 = sigma2[i]
        m = dxx[i, 2, 2]
        n_i = dxx[i, 0, 0]
        if s2 <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0, 0.0
        d = s2 + tau2 * m
        if d <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0, 0.0
        a = 1.0 / s2
        b = tau2 / (s2 * d)
        ld_sigma += (n_i - 1.0) * math.log(s2) + math.log(d)

        x0z = dxx[i, 0, 2]
        x1z = dxx[i, 1, 2]
        g00 = a * dxx[i, 0, 0] - b * x0z * x0z
        g01 = a * dxx[i, 0, 1] - b * x0z * x1z
        g11 = a * dxx[i, 1, 1] - b * x1z * x1z
        det = g00 * g11 - g01 * g01
        if det <= 0.0 or g00 <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0, 0.0
        ld_g += math.log(det)

        h0 = x0z / d
        h1 = x1z / d
        v0 = a * dxy[i, 0] - b * x0z * dxy[i, 2]
        v1 = a * dxy[i, 1] - b * x1z * dxy[i, 2]

        h_g_h += (g11 * h0 * h0 - 2.0 * g01 * h0 * h1 + g00 * h1 * h1) / det
        h_g_v += (g11 * h0 * v0 - g01 * (h0 * v1 + h1 * v0) + g00 * h1 * v1) / det
        v_g_v += (g11 * v0 * v0 - 2.0 * g01 * v0 * v1 + g00 * v1 * v1) / det
        w_acc += m / d
        vt_acc += dxy[i, 2] / d
        s_acc += a * dxy[i, 3] - b * dxy[i, 2] * dxy[i, 2]

    if use_trt:
        schur = w_acc - h_g_h
        if schur <= 0.0:
            return False, 0.0, 0.0, 0.0, 0.0, 0.0
        num = vt_acc - h_g_v
        theta = num / schur
        quad = s_acc - v_g_v - num * num / schur
        return True, ld_sigma, ld_g + math.log(schur), quad, theta, 1.0 / schur
    quad = s_acc - v_g_v
    return True, ld_sigma, ld_g, quad, 0.0, 0.0


@njit(cache=True)
def criterion_natural(dxx, dxy, tau2, sigma2, use_trt):
    """Restricted log-likelihood (up to a constant); -inf when degenerate."""
    ok, ld_sigma, ld_m, quad, _, _ = gls_core(dxx, dxy, tau2, sigma2, use_trt)
    if not ok:
        return _INVALID
    return -0.5 * (ld_sigma + ld_m + quad)


@njit(cache=True)
def profiled_criterion(dxx, dxy, phi, ratios, use_trt, n_minus_q):
    """Criterion with the residual scale profiled out.

    Sigma = s * V with V-blocks ratios_i * I + phi * z z^T; the optimal
    scale is s = quad_V / (n - q).  Returns (criterion, s); (-inf, 0) when
    the evaluation is degenerate.
    """
    ok, ld_v, ld_mv, quad_v, _, _ = gls_core(dxx, dxy, phi, ratios, use_trt)
    if not ok or quad_v <= 0.0:
        return _INVALID, 0.0
    scale = quad_v / n_minus_q
    crit = -0.5 * (ld_v + ld_mv + n_minus_q * (math.log(scale) + 1.0))
    return crit, scale


@njit(cache=True)
def fit_ratio_1d(dxx, dxy, ratios, use_trt, n_minus_q):
    """Maximize the profiled criterion over log phi.

    A coarse scan over [LOG_PHI_MIN, LOG_PHI_MAX] brackets the optimum,
    then golden-section search refines to GOLDEN_XTOL in log space.
    Returns log phi at the maximum (the caller detects a binding floor).
    """
    lo = LOG_PHI_MIN
    hi = LOG_PHI_MAX
    step = (hi - lo) / (N_SCAN - 1)
    best_j = 0
    best_f = math.inf
    for j in range(N_SCAN):
        x = lo + step * j
        c, _ = profiled_criterion(dxx, dxy, math.exp(x), ratios, use_trt, n_minus_q)
        f = -c
        if f < best_f:
            best_f = f
            best_j = j
    a = lo + step * (best_j - 1) if best_j > 0 else lo
    b = lo + step * (best_j + 1) if best_j < N_SCAN - 1 else hi

    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c_pt = b - invphi * (b - a)
    d_pt = a + invphi * (b - a)
    fc, _ = profiled_criterion(dxx, dxy, math.exp(c_pt), ratios, use_trt, n_minus_q)
    fd, _ = profiled_criterion(dxx, dxy, math.exp(d_pt), ratios, use_trt, n_minus_q)
    fc = -fc
    fd = -fd
    while (b - a) > GOLDEN_XTOL:
        if fc < fd:
            b = d_pt
            d_pt = c_pt
            fd = fc
            c_pt = b - invphi * (b - a)
            fc, _ = profiled_criterion(dxx, dxy, math.exp(c_pt), ratios, use_trt, n_minus_q)
            fc = -fc
        else:
            a = c_pt
            c_pt = d_pt
            fc = fd
            d_pt = a + invphi * (b - a)
            fd, _ = profiled_criterion(dxx, dxy, math.exp(d_pt), ratios, use_trt, n_minus_q)
            fd = -fd
    return 0.5 * (a + b)


@njit(cache=True)
def gls_estimate(dxx, dxy, phi, ratios, use_trt, n_minus_q):
    """(ok, theta, se, scale, crit) at a fixed ratio point, scale profiled."""
    ok, ld_v, ld_mv, quad_v, theta, var_v = gls_core(dxx, dxy, phi, ratios, use_trt)
    if not ok or quad_v <= 0.0:
        return False, 0.0, 0.0, 0.0, _INVALID
    scale = quad_v / n_minus_q
    crit = -0.5 * (ld_v + ld_mv + n_minus_q * (math.log(scale) + 1.0))
    se = math.sqrt(scale * var_v) if use_trt else 0.0
    return True, theta, se, scale, crit


@njit(cache=True)
def fit_chunk(y0, zf, starts, dxx, y_rows, ratios, n_minus_q):
    """Refit the full model to each response row and return its t-statistic.

    Used by the permutation loop: each row of y_rows is one permuted
    response.  Returns (t, ok) arrays of length y_rows.shape[0].
    """
    n_fit = y_rows.shape[0]
    t_out = np.empty(n_fit)
    ok_out = np.zeros(n_fit, dtype=np.bool_)
    for r in range(n_fit):
        dxy = response_crossprods(y0, zf, y_rows[r], starts)
        log_phi = fit_ratio_1d(dxx, dxy, ratios, True, n_minus_q)
        ok, theta, se, _, crit = gls_estimate(
            dxx, dxy, math.exp(log_phi), ratios, True, n_minus_q
        )
        if ok and se > 0.0 and math.isfinite(crit) and math.isfinite(theta / se):
            t_out[r] = theta / se
            ok_out[r] = True
        else:
            t_out[r] = np.nan
    return t_out, ok_out
