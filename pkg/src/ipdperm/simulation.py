"""Monte Carlo evaluation of the inference methods on simulated meta-analyses.

Datasets are generated from the stratified-intercept model with k = 4
studies by default: study sizes follow one of three regimes (very small:
a 0.8/0.2 mixture of U(15, 30) and U(30, 100); small: U(30, 100); medium:
U(100, 200)), allocation probabilities are U(0.5, 0.7), baselines are
N(4, 1), and residuals are normal, scaled Student-t3, or centered and
scaled log-normal(0, 1) (non-normal laws are rescaled to match the normal
variance).  Study sizes and allocations are redrawn for every replicate.

Per scenario cell the four headline metrics are recorded per method:
rejection rate (type-I error under theta = 0, power under theta = 1),
empirical coverage, average interval length, and average degrees of
freedom, each with binomial Monte Carlo standard errors where applicable.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .classical import (
    KENWARD_ROGER,
    NORMAL,
    PERMUTATION,
    PERMUTATION_SEARCH,
    SATTERTHWAITE,
    kenward_roger,
    satterthwaite_ci,
    wald_normal,
)
from .errors import ConfigError, IpdPermError
from .model import IpdDataset
from .permutation import (
    GENERATOR_NAME,
    default_search_grid,
    percentile_ci,
    permutation_distribution,
    search_ci,
)
from .reml import fit_reml

SIZE_REGIMES = ("very_small", "small", "medium")
RESIDUAL_LAWS = ("normal", "student_t3_scaled", "lognormal_scaled")
SEARCH = "search"  # alias accepted in method lists
METHOD_NAMES = (NORMAL, SATTERTHWAITE, KENWARD_ROGER, PERMUTATION, PERMUTATION_SEARCH)

EQUAL_SIGMA = (1.0, 1.0, 1.0, 1.0)
UNEQUAL_SIGMA = (0.9, 0.9, 0.9, 1.4)

# Variance of a log-normal(0, 1) draw; non-normal residuals are rescaled by
# sigma_i over the square root of their raw variance.
_LOGNORMAL_VAR = (math.e - 1.0) * math.e
_LOGNORMAL_MEAN = math.exp(0.5)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid."""

    k: int = 4
    size_regime: str = "small"
    theta: float = 0.0
    tau: float = 0.5
    sigma: tuple = EQUAL_SIGMA
    residual_law: str = "normal"
    intercepts: tuple = (0.9, 2.3, 0.3, 0.1)
    slopes: tuple = (0.8, 0.7, 0.9, 0.9)
    baseline_mean: float = 4.0
    baseline_sd: float = 1.0
    alloc_low: float = 0.5
    alloc_high: float = 0.7
    replicates: int = 1000
    alpha: float = 0.05
    n_perm_test: int = 10_000
    n_perm_search: int = 2_000
    m_grid: int = 5
    search_span: float = 4.0
    equal_variance_fit: bool = True
    methods: tuple = (NORMAL, SATTERTHWAITE, KENWARD_ROGER, PERMUTATION)
    label: str = ""

    def __post_init__(self):
        if self.size_regime not in SIZE_REGIMES:
            raise ConfigError(f"unknown size_regime: {self.size_regime!r} (expected one of {SIZE_REGIMES})")
        if self.residual_law not in RESIDUAL_LAWS:
            raise ConfigError(f"unknown residual_law: {self.residual_law!r} (expected one of {RESIDUAL_LAWS})")
        for name in ("sigma", "intercepts", "slopes"):
            vals = getattr(self, name)
            if len(vals) != self.k:
                raise ConfigError(f"{name} must have length k={self.k}, got {len(vals)}")
        if any(s <= 0 for s in self.sigma):
            raise ConfigError("sigma entries must be positive")
        if self.tau < 0:
            raise ConfigError("tau must be nonnegative")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not (0.0 < self.alpha < 1.0):
            raise ConfigError("alpha must lie in (0, 1)")
        bad = [m for m in self.methods if _canon_method(m) is None]
        if bad:
            raise ConfigError(f"unknown method(s): {', '.join(map(repr, bad))}")
        object.__setattr__(self, "methods", tuple(_canon_method(m) for m in self.methods))


def _canon_method(name):
    name = str(name).replace("-", "_").lower()
    if name == SEARCH:
        return PERMUTATION_SEARCH
    return name if name in METHOD_NAMES else None


@dataclass(frozen=True)
class MethodMetrics:
    method: str
    n_used: int
    n_failed: int
    rejection_rate: float
    rejection_mc_se: float
    coverage: float
    coverage_mc_se: float
    mean_ci_length: float
    mean_df: float | None


@dataclass(frozen=True)
class ScenarioMetrics:
    config: ScenarioConfig
    seed: int
    per_method: dict
    n_replicates: int
    failed: bool = False


def _draw_study_size(regime, rng):
    if regime == "small":
        raw = rng.uniform(30.0, 100.0)
    elif regime == "medium":
        raw = rng.uniform(100.0, 200.0)
    else:  # very_small mixture
        raw = rng.uniform(15.0, 30.0) if rng.random() < 0.8 else rng.uniform(30.0, 100.0)
    return max(int(np.rint(raw)), 3)


def _draw_residuals(law, sigma_i, n_i, rng):
    if law == "normal":
        return rng.normal(0.0, sigma_i, n_i)
    if law == "student_t3_scaled":
        return rng.standard_t(3, n_i) * (sigma_i / math.sqrt(3.0))
    draws = rng.lognormal(0.0, 1.0, n_i)
    return (draws - _LOGNORMAL_MEAN) * (sigma_i / math.sqrt(_LOGNORMAL_VAR))


def generate_dataset(cfg, rng_seed):
    """Simulate one IPD dataset for a scenario cell.

    Study sizes, allocations, baselines, random effects, and residuals are
    drawn in a fixed order from a single generator, so a given seed yields
    the same dataset on every platform.  Single-armed studies are resampled.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    study, y, y0, z = [], [], [], []
    for i in range(cfg.k):
        n_i = _draw_study_size(cfg.size_regime, rng)
        p_i = rng.uniform(cfg.alloc_low, cfg.alloc_high)
        zi = rng.binomial(1, p_i, n_i)
        while zi.min() == zi.max():
            zi = rng.binomial(1, p_i, n_i)
        y0i = rng.normal(cfg.baseline_mean, cfg.baseline_sd, n_i)
        u_i = rng.normal(cfg.theta, cfg.tau)
        eps = _draw_residuals(cfg.residual_law, cfg.sigma[i], n_i, rng)
        yi = cfg.intercepts[i] + cfg.slopes[i] * y0i + u_i * zi + eps
        study.extend([i] * n_i)
        y.extend(yi)
        y0.extend(y0i)
        z.extend(zi)
    return IpdDataset.from_arrays(study, y, y0, z)


_FAILED = (False, False, math.nan, math.nan, False)  # reject, cover, length, df, ok


def _replicate_records(cfg, methods, seed, rep):
    """Run one replicate; returns {method: (reject, cover, length, df, ok)}."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(rep, 0)))
    perm_seed = int(np.random.SeedSequence(entropy=int(seed), spawn_key=(rep, 1)).generate_state(1, np.uint64)[0])
    search_seed = int(np.random.SeedSequence(entropy=int(seed), spawn_key=(rep, 2)).generate_state(1, np.uint64)[0])
    out = {}
    dataset = generate_dataset(cfg, rng)
    try:
        fit = fit_reml(dataset, equal_variances=cfg.equal_variance_fit)
    except IpdPermError:
        return {m: _FAILED for m in methods}

    draws = None
    if PERMUTATION in methods or PERMUTATION_SEARCH in methods:
        try:
            draws = permutation_distribution(
                dataset, cfg.n_perm_test, perm_seed,
                equal_variances=cfg.equal_variance_fit, full_fit=fit,
            )
        except IpdPermError:
            draws = None

    for method in methods:
        try:
            if method == NORMAL:
                res = wald_normal(fit, cfg.alpha)
            elif method == SATTERTHWAITE:
                res = satterthwaite_ci(fit, cfg.alpha)
            elif method == KENWARD_ROGER:
                res = kenward_roger(fit, cfg.alpha)
            elif method == PERMUTATION:
                if draws is None:
                    raise IpdPermError("permutation distribution unavailable")
                res = percentile_ci(dataset, fit, draws, cfg.alpha)
            else:  # PERMUTATION_SEARCH
                grid = default_search_grid(
                    fit, cfg.alpha, m_points=cfg.m_grid, span=cfg.search_span
                )
                res = search_ci(
                    dataset, fit, grid, cfg.n_perm_search, search_seed,
                    equal_variances=cfg.equal_variance_fit, draws=draws,
                )
        except IpdPermError:
            out[method] = _FAILED
            continue
        out[method] = (
            res.p_value <= cfg.alpha,
            res.ci_lower <= cfg.theta <= res.ci_upper,
            res.ci_length,
            res.df,
            True,
        )
    return out


def _replicate_star(args):
    return _replicate_records(*args)


def run_scenario(cfg, methods=None, seed=None, workers=1):
    """Run all replicates of one scenario cell and aggregate the metrics.

    Per-replicate failures are recorded per method, never fatal; the
    scenario is flagged as failed when any requested method loses more than
    10% of its replicates.  Results are identical for any worker count.
    """
    methods = tuple(_canon_method(m) or m for m in (methods or cfg.methods))
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    seed = int(seed)
    tasks = [(cfg, methods, seed, r) for r in range(cfg.replicates)]
    if workers > 1 and cfg.replicates > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_replicate_star, tasks, chunksize=8))
    else:
        records = [_replicate_star(t) for t in tasks]

    per_method = {}
    failed = False
    for method in methods:
        rows = [r[method] for r in records]
        ok = np.array([r[4] for r in rows], dtype=bool)
        n_used = int(ok.sum())
        n_failed = len(rows) - n_used
        if n_failed > 0.10 * cfg.replicates:
            failed = True
        if n_used == 0:
            per_method[method] = MethodMetrics(method, 0, n_failed, math.nan, math.nan,
                                               math.nan, math.nan, math.nan, None)
            continue
        rej = np.array([r[0] for r in rows], dtype=float)[ok]
        cov = np.array([r[1] for r in rows], dtype=float)[ok]
        length = np.array([r[2] for r in rows], dtype=float)[ok]
        dfs = np.array([r[3] for r in rows], dtype=float)[ok]
        r_rate = float(rej.mean())
        c_rate = float(cov.mean())
        finite_df = dfs[np.isfinite(dfs)]
        per_method[method] = MethodMetrics(
            method=method,
            n_used=n_used,
            n_failed=n_failed,
            rejection_rate=r_rate,
            rejection_mc_se=math.sqrt(r_rate * (1.0 - r_rate) / n_used),
            coverage=c_rate,
            coverage_mc_se=math.sqrt(c_rate * (1.0 - c_rate) / n_used),
            mean_ci_length=float(length.mean()),
            mean_df=float(finite_df.mean()) if finite_df.size else None,
        )
    return ScenarioMetrics(config=cfg, seed=seed, per_method=per_method,
                           n_replicates=cfg.replicates, failed=failed)


def sweep(grid, seed=None, workers=1, progress=None):
    """Run a list of scenario cells; each cell gets an independent substream.

    Returns a list of ScenarioMetrics in grid order.  `progress` is an
    optional callable(index, total, config).
    """
    if seed is None:
        seed = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    seed = int(seed)
    out = []
    for s, cfg in enumerate(grid):
        if progress is not None:
            progress(s, len(grid), cfg)
        cell_seed = int(np.random.SeedSequence(entropy=seed, spawn_key=(s,)).generate_state(1, np.uint64)[0])
        out.append(run_scenario(cfg, seed=cell_seed, workers=workers))
    return out


RESULT_COLUMNS = (
    "schema_version", "package_version", "generator", "master_seed", "scenario_index",
    "label", "k", "size_regime", "theta", "tau", "sigma", "residual_law",
    "replicates", "alpha", "n_perm_test", "n_perm_search", "m_grid", "search_span",
    "equal_variance_fit", "method", "n_used", "n_failed", "rejection_rate",
    "rejection_mc_se", "coverage", "coverage_mc_se", "mean_ci_length", "mean_df",
    "scenario_failed",
)

SCHEMA_VERSION = 1


def _fmt(value):
    if value is None:
        return "NA"
    if isinstance(value, float):
        return "NA" if math.isnan(value) else repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def results_rows(metrics_list, master_seed):
    """Flatten ScenarioMetrics into long-format rows (one per method)."""
    rows = []
    for s, sm in enumerate(metrics_list):
        cfg = sm.config
        for method, mm in sm.per_method.items():
            rows.append({
                "schema_version": SCHEMA_VERSION,
                "package_version": __version__,
                "generator": GENERATOR_NAME,
                "master_seed": master_seed,
                "scenario_index": s,
                "label": cfg.label,
                "k": cfg.k,
                "size_regime": cfg.size_regime,
                "theta": cfg.theta,
                "tau": cfg.tau,
                "sigma": ";".join(repr(v) for v in cfg.sigma),
                "residual_law": cfg.residual_law,
                "replicates": cfg.replicates,
                "alpha": cfg.alpha,
                "n_perm_test": cfg.n_perm_test,
                "n_perm_search": cfg.n_perm_search,
                "m_grid": cfg.m_grid,
                "search_span": cfg.search_span,
                "equal_variance_fit": cfg.equal_variance_fit,
                "method": method,
                "n_used": mm.n_used,
                "n_failed": mm.n_failed,
                "rejection_rate": mm.rejection_rate,
                "rejection_mc_se": mm.rejection_mc_se,
                "coverage": mm.coverage,
                "coverage_mc_se": mm.coverage_mc_se,
                "mean_ci_length": mm.mean_ci_length,
                "mean_df": mm.mean_df,
                "scenario_failed": sm.failed,
            })
    return rows


def format_results_csv(rows):
    lines = [",".join(RESULT_COLUMNS)]
    for row in rows:
        lines.append(",".join(_fmt(row[c]) for c in RESULT_COLUMNS))
    return "\n".join(lines) + "\n"


def scenario_from_dict(raw, defaults=None):
    """Build a ScenarioConfig from a plain dict (the config-file format).

    Unknown keys are rejected by name; `sigma` accepts "equal", "unequal",
    or an explicit list of k values.
    """
    allowed = {f.name for f in fields(ScenarioConfig)}
    merged = dict(defaults or {})
    merged.update(raw)
    unknown = sorted(set(merged) - allowed)
    if unknown:
        raise ConfigError(f"unknown scenario key(s): {', '.join(unknown)}")
    if isinstance(merged.get("sigma"), str):
        tag = merged["sigma"].lower()
        if tag == "equal":
            merged["sigma"] = tuple([1.0] * int(merged.get("k", 4)))
        elif tag == "unequal":
            merged["sigma"] = UNEQUAL_SIGMA
        else:
            raise ConfigError(f"sigma must be 'equal', 'unequal', or a list, got {merged['sigma']!r}")
    for key in ("sigma", "intercepts", "slopes", "methods"):
        if key in merged and not isinstance(merged[key], tuple):
            merged[key] = tuple(merged[key])
    return ScenarioConfig(**merged)


__all__ = [
    "ScenarioConfig", "MethodMetrics", "ScenarioMetrics",
    "generate_dataset", "run_scenario", "sweep",
    "results_rows", "format_results_csv", "scenario_from_dict",
    "EQUAL_SIGMA", "UNEQUAL_SIGMA", "SIZE_REGIMES", "RESIDUAL_LAWS",
]
