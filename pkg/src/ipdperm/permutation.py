"""Studentized permutation test and the two permutation confidence intervals.

The test statistic is t = theta_hat / se(theta_hat) from the full REML fit.
Plain residuals are not exchangeable across studies (their covariance is
block-structured with study-specific variances), so the null-model fit is
used to whiten them:

    1. fit the full model to Y, keep t;
    2. fit the theta-excluded model, form Sigma_hat = tau2_hat Z Z^T + R_hat
       with upper Cholesky factor W_hat, and standardize
       eps_tilde = (W_hat^T)^{-1} (Y - X beta_hat);
    3. for each permutation p: shuffle eps_tilde across all positions,
       rebuild Y_p = X beta_hat + W_hat^T eps_tilde_p, refit the full model,
       record t_p.

Two intervals follow.  The percentile interval takes the empirical alpha/2
and 1-alpha/2 quantiles t* of {t_p} and reports
[theta_hat - t*_{1-a/2} se, theta_hat - t*_{a/2} se].  The search interval
shifts the outcomes by a candidate theta_0 (largest-to-smallest candidates
for the lower bound), reruns the whole test on the shifted data, and keeps
the first candidate whose one-sided p-value drops to alpha/2.

Randomness: permutation p of a run seeded with s is drawn from the PCG64
substream SeedSequence(s, spawn_key=(p // CHUNK,)), so results do not
depend on worker scheduling or the number of workers.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm as _norm
from scipy.stats import t as _student_t

from . import _kernels as K
from .classical import PERMUTATION, PERMUTATION_SEARCH, InferenceResult
from .errors import IpdPermError, SearchRangeError, UnreliableDistributionError
from .model import build_design, marginal_covariance, upper_triangular_factor
from .reml import fit_reml, t_statistic

CHUNK = 256
GENERATOR_NAME = "pcg64"
MAX_FAILED_FRACTION = 0.05


@dataclass(frozen=True)
class PermutationDraws:
    """Observed t, the permuted t values, and the seed that produced them."""

    t_observed: float
    t_perm: np.ndarray
    n_permutations: int
    seed: int
    n_failed: int
    generator: str = GENERATOR_NAME

    def __post_init__(self):
        if self.t_perm.size != self.n_permutations - self.n_failed:
            raise ValueError("t_perm length must equal N - n_failed")
        if not np.all(np.isfinite(self.t_perm)):
            raise ValueError("permuted t values must be finite")


@dataclass(frozen=True)
class SearchGrid:
    """Grid specification for the search interval (M points per side)."""

    lower_range: tuple
    upper_range: tuple
    m_points: int = 5
    alpha: float = 0.05

    def __post_init__(self):
        if self.m_points < 2:
            raise ValueError("at least two grid points per side are required")
        if not (0.0 < self.alpha < 1.0):
            raise ValueError("alpha must lie in (0, 1)")
        if self.lower_range[0] > self.lower_range[1] or self.upper_range[0] > self.upper_range[1]:
            raise ValueError("ranges must be (start, end) with start <= end")


def standardized_residuals(dataset, null_fit):
    """Whitened residuals (W_hat^T)^{-1} (Y - X beta_hat) from the null fit.

    Under a correctly specified null model these are exchangeable across all
    patients and studies, which licenses the unrestricted permutation.
    """
    if not null_fit.null_constrained:
        raise ValueError("standardized residuals require the theta-excluded (null) fit")
    design = build_design(dataset)
    y = dataset.y
    if null_fit.theta_offset != 0.0:
        y = y - null_fit.theta_offset * dataset.z_float
    resid = y - design.X @ null_fit.beta_hat
    factor = upper_triangular_factor(marginal_covariance(null_fit.vc_hat, design))
    return factor.whiten(resid)


def _child_seed(seed, *key):
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(x) for x in key))
    return int(ss.generate_state(1, np.uint64)[0])


def _chunk_ranges(n_perm):
    return [(c, min(CHUNK, n_perm - c * CHUNK)) for c in range((n_perm + CHUNK - 1) // CHUNK)]


def _refit_rows(dataset, y_rows, equal_variances):
    """Full-model refit for each response row; returns (t, ok) arrays."""
    ratios = np.ones(dataset.k)
    n_minus_q = dataset.n - (2 * dataset.k + 1)
    if equal_variances:
        return K.fit_chunk(
            dataset.y0, dataset.z_float, dataset.starts,
            dataset.design_crossprods, np.ascontiguousarray(y_rows), ratios, n_minus_q,
        )
    t_out = np.full(y_rows.shape[0], np.nan)
    ok_out = np.zeros(y_rows.shape[0], dtype=bool)
    for r in range(y_rows.shape[0]):
        try:
            fit = fit_reml(dataset.with_outcome(y_rows[r]), equal_variances=False)
            t_out[r] = t_statistic(fit)
            ok_out[r] = math.isfinite(t_out[r])
        except IpdPermError:
            pass
    return t_out, ok_out


def _permuted_responses(eps, mu, w_blocks, blocks, perms):
    """Y_p = X beta_hat + W^T eps[perm] for a batch of permutations (rows)."""
    e_rows = eps[perms]
    y_rows = np.empty_like(e_rows)
    for w, sl in zip(w_blocks, blocks):
        y_rows[:, sl] = e_rows[:, sl] @ w + mu[sl]
    return y_rows


def _run_chunk(dataset, eps, mu, w_blocks, blocks, seed, chunk_index, size, equal_variances):
    rng = np.random.default_rng(
        np.random.SeedSequence(entropy=int(seed), spawn_key=(int(chunk_index),))
    )
    perms = np.argsort(rng.random((size, eps.size)), axis=1)
    y_rows = _permuted_responses(eps, mu, w_blocks, blocks, perms)
    return _refit_rows(dataset, y_rows, equal_variances)


def _run_chunk_star(args):
    return _run_chunk(*args)


def permutation_distribution(
    dataset,
    n_perm=10_000,
    seed=None,
    *,
    equal_variances=True,
    workers=1,
    full_fit=None,
    null_fit=None,
):
    """Generate the permutation distribution of the t statistic.

    Args:
        dataset: the data to test (already shifted when testing a nonzero
            null value).
        n_perm: number of permutations N (>= 100 for inferential use).
        seed: integer seed; results replay exactly for a fixed seed, for
            any number of workers.
        equal_variances: variance constraint used in all fits and refits.
        workers: process count for the refit loop (1 = in-process).
        full_fit, null_fit: optional pre-computed fits to avoid refitting.

    Returns:
        PermutationDraws.  Non-converged refits are dropped and counted;
        more than 5% of N failing raises UnreliableDistributionError.
    """
    if n_perm < 1:
        raise ValueError("n_perm must be at least 1")
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    seed = int(seed)

    if full_fit is None:
        full_fit = fit_reml(dataset, equal_variances=equal_variances, include_treatment=True)
    if null_fit is None:
        null_fit = fit_reml(dataset, equal_variances=equal_variances, include_treatment=False)

    t_obs = t_statistic(full_fit)
    design = build_design(dataset)
    mu = design.X @ null_fit.beta_hat
    factor = upper_triangular_factor(marginal_covariance(null_fit.vc_hat, design))
    eps = factor.whiten(dataset.y - mu)
    blocks = dataset.study_blocks

    tasks = [
        (dataset, eps, mu, factor.blocks, blocks, seed, c, size, equal_variances)
        for c, size in _chunk_ranges(n_perm)
    ]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_chunk_star, tasks))
    else:
        results = [_run_chunk_star(t) for t in tasks]

    t_all = np.concatenate([t for t, _ in results])
    ok_all = np.concatenate([ok for _, ok in results])
    n_failed = int(n_perm - ok_all.sum())
    if n_failed > MAX_FAILED_FRACTION * n_perm:
        raise UnreliableDistributionError(
            f"{n_failed} of {n_perm} permutation refits failed to converge "
            f"(> {MAX_FAILED_FRACTION:.0%}); the permutation distribution is unreliable"
        )
    return PermutationDraws(
        t_observed=float(t_obs),
        t_perm=t_all[ok_all],
        n_permutations=int(n_perm),
        seed=seed,
        n_failed=n_failed,
    )


def _distribution_for_permutations(dataset, perms, *, equal_variances=True):
    """Test hook: run the engine on explicitly supplied permutations."""
    full_fit = fit_reml(dataset, equal_variances=equal_variances, include_treatment=True)
    null_fit = fit_reml(dataset, equal_variances=equal_variances, include_treatment=False)
    design = build_design(dataset)
    mu = design.X @ null_fit.beta_hat
    factor = upper_triangular_factor(marginal_covariance(null_fit.vc_hat, design))
    eps = factor.whiten(dataset.y - mu)
    y_rows = _permuted_responses(eps, mu, factor.blocks, dataset.study_blocks, np.asarray(perms))
    t_vals, ok = _refit_rows(dataset, y_rows, equal_variances)
    return PermutationDraws(
        t_observed=float(t_statistic(full_fit)),
        t_perm=t_vals[ok],
        n_permutations=len(perms),
        seed=0,
        n_failed=int(len(perms) - ok.sum()),
    )


def permutation_p_value(draws, alternative="two_sided", smoothed=False):
    """p-value from the permutation distribution.

    greater: #{t_p >= t} / N'.  less: 1 - #{t_p >= t} / N'.  two_sided:
    min(2 * less, 2 * greater) capped at 1.  With `smoothed`, one-sided
    counts use (1 + count) / (1 + N') instead.
    """
    n_eff = draws.t_perm.size
    if n_eff == 0:
        raise UnreliableDistributionError("no converged permutation refits available")
    count_ge = int(np.sum(draws.t_perm >= draws.t_observed))
    if smoothed:
        greater = (1.0 + count_ge) / (1.0 + n_eff)
        less = (1.0 + n_eff - count_ge) / (1.0 + n_eff)
    else:
        greater = count_ge / n_eff
        less = 1.0 - count_ge / n_eff
    if alternative == "greater":
        return greater
    if alternative == "less":
        return less
    if alternative == "two_sided":
        return min(2.0 * min(greater, less), 1.0)
    raise ValueError(f"unknown alternative: {alternative!r}")


def percentile_ci(dataset, fit, draws, alpha=0.05):
    """Percentile interval from the permutation quantiles of t.

    CI = [theta_hat - t*_{1-a/2} se, theta_hat - t*_{a/2} se], where t* are
    empirical quantiles of the permuted t values.
    """
    t_lo, t_hi = np.quantile(draws.t_perm, [alpha / 2.0, 1.0 - alpha / 2.0])
    se = fit.se_theta
    return InferenceResult(
        method=PERMUTATION,
        t_value=draws.t_observed,
        df=math.inf,
        se_used=se,
        p_value=permutation_p_value(draws, "two_sided"),
        ci_lower=fit.theta_hat - t_hi * se,
        ci_upper=fit.theta_hat - t_lo * se,
        alpha=alpha,
    )


def default_search_grid(fit, alpha=0.05, m_points=5, span=None):
    """Recommended ranges: z to t_2 quantile half-widths around theta_hat.

    `span` replaces the outer t_2 multiplier when given (the simulation
    setup uses 4 standard errors).
    """
    z = _norm.ppf(1.0 - alpha / 2.0)
    far = _student_t.ppf(1.0 - alpha / 2.0, 2) if span is None else float(span)
    th, se = fit.theta_hat, fit.se_theta
    return SearchGrid(
        lower_range=(th - far * se, th - z * se),
        upper_range=(th + z * se, th + far * se),
        m_points=m_points,
        alpha=alpha,
    )


def search_ci(
    dataset,
    fit,
    grid=None,
    n_perm=2_000,
    seed=None,
    *,
    equal_variances=True,
    workers=1,
    draws=None,
):
    """Search interval: the candidate closest to theta_hat that just rejects.

    For the upper bound, candidates theta_0 ascend through the grid; the
    outcomes are shifted by theta_0, the permutation test is rerun against
    the one-sided alternative theta < theta_0, and the first candidate with
    p <= alpha/2 becomes the bound.  The lower bound mirrors this with a
    descending grid and the alternative theta > theta_0.

    Raises SearchRangeError (reporting the exhausted range) when no grid
    point rejects; callers may widen the range and retry.
    """
    if grid is None:
        grid = default_search_grid(fit)
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    seed = int(seed)
    theta_hat = fit.theta_hat
    if grid.upper_range[0] < theta_hat or grid.lower_range[1] > theta_hat:
        raise ValueError("search grid does not bracket the point estimate")
    alpha = grid.alpha
    m = grid.m_points

    def one_sided_p(theta0, side_code, idx, alternative):
        shifted = dataset.with_outcome(dataset.y - theta0 * dataset.z_float)
        d = permutation_distribution(
            shifted,
            n_perm,
            _child_seed(seed, side_code, idx),
            equal_variances=equal_variances,
            workers=workers,
        )
        return permutation_p_value(d, alternative)

    upper = None
    for j, theta0 in enumerate(np.linspace(grid.upper_range[0], grid.upper_range[1], m)):
        if one_sided_p(float(theta0), 1, j, "less") <= alpha / 2.0:
            upper = float(theta0)
            break
    if upper is None:
        raise SearchRangeError(
            f"no upper grid point in [{grid.upper_range[0]:.6g}, {grid.upper_range[1]:.6g}] "
            f"rejected at level {alpha / 2.0:g}; widen the range",
            exhausted_range=grid.upper_range,
        )

    lower = None
    for j, theta0 in enumerate(np.linspace(grid.lower_range[1], grid.lower_range[0], m)):
        if one_sided_p(float(theta0), 2, j, "greater") <= alpha / 2.0:
            lower = float(theta0)
            break
    if lower is None:
        raise SearchRangeError(
            f"no lower grid point in [{grid.lower_range[0]:.6g}, {grid.lower_range[1]:.6g}] "
            f"rejected at level {alpha / 2.0:g}; widen the range",
            exhausted_range=grid.lower_range,
        )

    if draws is None:
        point = permutation_distribution(
            dataset, n_perm, _child_seed(seed, 0, 0),
            equal_variances=equal_variances, workers=workers, full_fit=fit,
        )
    else:
        point = draws
    return InferenceResult(
        method=PERMUTATION_SEARCH,
        t_value=float(t_statistic(fit)),
        df=math.inf,
        se_used=fit.se_theta,
        p_value=permutation_p_value(point, "two_sided"),
        ci_lower=lower,
        ci_upper=upper,
        alpha=alpha,
    )
