"""Command-line entry points: `ipdperm analyze` and `ipdperm simulate`.

All randomness flows through --seed; when omitted, a seed is drawn from
system entropy and printed to stderr.  Machine-readable outputs are
deterministic byte-for-byte for a fixed seed, for any worker count, so
wall-clock timings go to stderr only.  Output files are written to a
temporary name and renamed, leaving no partial files on failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field

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
from .errors import ConfigError, IpdPermError, KrAdjustmentError
from .model import IpdDataset
from .permutation import (
    GENERATOR_NAME,
    _child_seed,
    default_search_grid,
    percentile_ci,
    permutation_distribution,
    search_ci,
)
from .presets import PRESETS, preset_grid
from .reml import fit_reml
from .simulation import format_results_csv, results_rows, scenario_from_dict, sweep

SCHEMA_VERSION = 1

_METHOD_ALIASES = {
    "normal": NORMAL,
    "satterthwaite": SATTERTHWAITE,
    "kenward-roger": KENWARD_ROGER,
    "kenward_roger": KENWARD_ROGER,
    "kr": KENWARD_ROGER,
    "permutation": PERMUTATION,
    "search": PERMUTATION_SEARCH,
    "permutation-search": PERMUTATION_SEARCH,
    "permutation_search": PERMUTATION_SEARCH,
}
DEFAULT_METHODS = (NORMAL, SATTERTHWAITE, KENWARD_ROGER, PERMUTATION, PERMUTATION_SEARCH)


@dataclass
class AnalysisReport:
    """Everything `analyze` reports; serializes losslessly to JSON."""

    seed: int
    alpha: float
    n_perm: int
    n_perm_search: int
    m_grid: int
    equal_variances: bool
    dataset: dict
    fit: dict
    results: list
    warnings: list = field(default_factory=list)
    schema_version: int = SCHEMA_VERSION
    package_version: str = __version__
    generator: str = GENERATOR_NAME

    def to_json(self):
        payload = {
            "schema_version": self.schema_version,
            "package_version": self.package_version,
            "generator": self.generator,
            "seed": self.seed,
            "alpha": self.alpha,
            "n_perm": self.n_perm,
            "n_perm_search": self.n_perm_search,
            "m_grid": self.m_grid,
            "equal_variances": self.equal_variances,
            "dataset": self.dataset,
            "fit": self.fit,
            "results": self.results,
            "warnings": self.warnings,
        }
        return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"

    def to_text(self):
        lines = []
        ds = self.dataset
        lines.append(f"ipdperm {self.package_version} analysis report")
        lines.append(f"seed: {self.seed} (generator: {self.generator})")
        lines.append("")
        sizes = ", ".join(
            f"{s['label']}: n={s['n']} ({s['n_treated']} treated)" for s in ds["studies"]
        )
        lines.append(f"dataset: k={ds['k']} studies, {ds['n_total']} patients [{sizes}]")
        fit = self.fit
        lines.append(
            f"REML fit: theta = {fit['theta_hat']:.6g} (se {fit['se_theta']:.6g}), "
            f"tau2 = {fit['tau2']:.6g}, sigma2 = "
            + ", ".join(f"{s:.6g}" for s in fit["sigma2"])
        )
        lines.append(f"restricted log-likelihood: {fit['restricted_loglik']:.6g}")
        lines.append("")
        hdr = f"{'method':<20}{'t':>10}{'df':>10}{'p':>12}{'CI low':>12}{'CI high':>12}"
        lines.append(hdr)
        lines.append("-" * len(hdr))
        for res in self.results:
            df = res["df"]
            df_txt = "inf" if df is None else f"{df:.3f}"
            lines.append(
                f"{res['method']:<20}{res['t_value']:>10.4f}{df_txt:>10}"
                f"{res['p_value']:>12.5g}{res['ci_lower']:>12.5g}{res['ci_upper']:>12.5g}"
            )
        if self.warnings:
            lines.append("")
            for w in self.warnings:
                lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def _json_default(obj):
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj)}")


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _parse_methods(spec):
    methods = []
    for raw in spec.split(","):
        name = raw.strip().lower()
        if not name:
            continue
        if name not in _METHOD_ALIASES:
            raise ConfigError(
                f"unknown method {raw!r}; choose from {', '.join(sorted(set(_METHOD_ALIASES)))}"
            )
        canon = _METHOD_ALIASES[name]
        if canon not in methods:
            methods.append(canon)
    if not methods:
        raise ConfigError("no methods requested")
    return tuple(methods)


def _resolve_seed(seed):
    if seed is not None:
        return int(seed)
    drawn = int(np.random.SeedSequence().generate_state(1, np.uint64)[0])
    print(f"ipdperm: no --seed given; drew seed {drawn} from system entropy", file=sys.stderr)
    return drawn


def cmd_analyze(args):
    t_start = time.perf_counter()
    seed = _resolve_seed(args.seed)
    methods = _parse_methods(args.methods)
    needs_perm = PERMUTATION in methods or PERMUTATION_SEARCH in methods
    if needs_perm and (args.n_perm < 100 or args.n_perm_search < 100):
        raise ConfigError("permutation inference requires at least 100 permutations")
    dataset = IpdDataset.from_csv(args.input)

    fit = fit_reml(dataset, equal_variances=args.equal_variances)
    warnings = []
    if fit.vc_hat.tau2 == 0.0:
        warnings.append("heterogeneity estimate tau2 is at the boundary (0)")

    draws = None
    if needs_perm:
        draws = permutation_distribution(
            dataset, args.n_perm, _child_seed(seed, 0),
            equal_variances=args.equal_variances, workers=args.workers, full_fit=fit,
        )
        if draws.n_failed:
            warnings.append(f"{draws.n_failed} of {args.n_perm} permutation refits dropped")

    results = []
    for method in methods:
        fallback = None
        if method == NORMAL:
            res = wald_normal(fit, args.alpha)
        elif method == SATTERTHWAITE:
            res = satterthwaite_ci(fit, args.alpha)
        elif method == KENWARD_ROGER:
            try:
                res = kenward_roger(fit, args.alpha)
            except KrAdjustmentError as exc:
                warnings.append(
                    f"kenward_roger adjustment failed ({exc}); reporting the satterthwaite interval in its place"
                )
                res = satterthwaite_ci(fit, args.alpha)
                fallback = res.method
        elif method == PERMUTATION:
            res = percentile_ci(dataset, fit, draws, args.alpha)
        else:
            grid = default_search_grid(fit, args.alpha, m_points=args.m_grid, span=args.search_span)
            res = search_ci(
                dataset, fit, grid, args.n_perm_search, _child_seed(seed, 1),
                equal_variances=args.equal_variances, workers=args.workers, draws=draws,
            )
        entry = res.to_dict()
        if fallback is not None:
            # keep the requested method's slot; mark what was substituted
            entry["method"] = method
            entry["fallback"] = fallback
        if method in (PERMUTATION, PERMUTATION_SEARCH) and draws is not None:
            entry["n_permutations"] = draws.n_permutations
            entry["n_failed"] = draws.n_failed
            entry["permutation_seed"] = draws.seed
        results.append(entry)

    report = AnalysisReport(
        seed=seed,
        alpha=args.alpha,
        n_perm=args.n_perm,
        n_perm_search=args.n_perm_search,
        m_grid=args.m_grid,
        equal_variances=args.equal_variances,
        dataset=dataset.summary(),
        fit={
            "theta_hat": fit.theta_hat,
            "se_theta": fit.se_theta,
            "t_value": fit.theta_hat / fit.se_theta,
            "tau2": fit.vc_hat.tau2,
            "sigma2": list(map(float, fit.vc_hat.sigma2)),
            "restricted_loglik": fit.restricted_loglik,
            "converged": fit.converged,
        },
        results=results,
        warnings=warnings,
    )

    sys.stdout.write(report.to_json() if args.format == "json" else report.to_text())
    if args.output:
        _atomic_write(args.output, report.to_json())
    print(f"ipdperm: analyze finished in {time.perf_counter() - t_start:.2f}s", file=sys.stderr)
    return 0


def _load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if isinstance(raw, list):
        raw = {"scenarios": raw}
    unknown = sorted(set(raw) - {"defaults", "scenarios"})
    if unknown:
        raise ConfigError(f"{path}: unknown top-level key(s): {', '.join(unknown)}")
    scenarios = raw.get("scenarios")
    if not scenarios:
        raise ConfigError(f"{path}: no scenarios defined")
    defaults = raw.get("defaults", {})
    return [scenario_from_dict(s, defaults) for s in scenarios]


def cmd_simulate(args):
    t_start = time.perf_counter()
    seed = _resolve_seed(args.seed)
    if args.preset:
        grid = preset_grid(args.preset)
    else:
        grid = _load_config(args.config)

    def progress(i, total, cfg):
        print(
            f"ipdperm: scenario {i + 1}/{total}: tau={cfg.tau} law={cfg.residual_law} "
            f"size={cfg.size_regime} theta={cfg.theta} reps={cfg.replicates}",
            file=sys.stderr,
        )

    metrics = sweep(grid, seed=seed, workers=args.workers, progress=progress)
    for i, sm in enumerate(metrics):
        if sm.failed:
            print(f"ipdperm: warning: scenario {i} flagged failed (>10% replicate failures)", file=sys.stderr)
    text = format_results_csv(results_rows(metrics, seed))
    if args.output:
        _atomic_write(args.output, text)
    else:
        sys.stdout.write(text)
    print(f"ipdperm: simulate finished in {time.perf_counter() - t_start:.2f}s", file=sys.stderr)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="ipdperm",
        description="Permutation and small-sample inference for IPD meta-analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="analyze one IPD dataset (CSV: study,y,y0,z)")
    pa.add_argument("--input", required=True, help="input CSV path")
    pa.add_argument("--methods", default=",".join(DEFAULT_METHODS),
                    help="comma-separated list (default: all five)")
    pa.add_argument("--alpha", type=float, default=0.05)
    pa.add_argument("--n-perm", type=int, default=10_000,
                    help="permutations for the test and percentile interval")
    pa.add_argument("--n-perm-search", type=int, default=2_000,
                    help="permutations inside each search-interval test")
    pa.add_argument("--m-grid", type=int, default=5, help="grid points per search side")
    pa.add_argument("--search-span", type=float, default=None,
                    help="outer search range in standard errors (default: t_2 quantile)")
    pa.add_argument("--seed", type=int, default=None)
    pa.add_argument("--equal-variances", action=argparse.BooleanOptionalAction, default=True,
                    help="constrain residual variances equal across studies")
    pa.add_argument("--output", default=None, help="write machine-readable JSON here")
    pa.add_argument("--format", choices=("text", "json"), default="text",
                    help="stdout format")
    pa.add_argument("--workers", type=int, default=1)
    pa.set_defaults(func=cmd_analyze)

    ps = sub.add_parser("simulate", help="run a simulation sweep")
    group = ps.add_mutually_exclusive_group(required=True)
    group.add_argument("--preset", choices=sorted(PRESETS), help="bundled scenario grid")
    group.add_argument("--config", help="JSON scenario file")
    ps.add_argument("--output", default=None, help="results CSV path (default: stdout)")
    ps.add_argument("--seed", type=int, default=None)
    ps.add_argument("--workers", type=int, default=1)
    ps.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except IpdPermError as exc:
        print(f"ipdperm: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"ipdperm: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # pragma: no cover - unexpected
        print(f"ipdperm: unexpected error: {exc!r}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
