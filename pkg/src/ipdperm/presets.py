"""Bundled simulation grids.

The four paper-scale presets sweep three residual laws by six heterogeneity
levels at the published permutation counts (10,000 for the test and
percentile interval, 2,000 inside the search); they are expensive.  The
desk-scale preset is the reduced grid used by the acceptance suite.
"""

from .classical import KENWARD_ROGER, NORMAL, PERMUTATION, PERMUTATION_SEARCH, SATTERTHWAITE
from .simulation import ScenarioConfig

TAU_GRID = (0.01, 0.1, 0.3, 0.5, 0.7, 1.0)
LAW_GRID = ("normal", "lognormal_scaled", "student_t3_scaled")

TEST_METHODS = (NORMAL, SATTERTHWAITE, KENWARD_ROGER, PERMUTATION)
CI_METHODS = TEST_METHODS + (PERMUTATION_SEARCH,)


def _paper_grid(theta, methods):
    return [
        ScenarioConfig(
            theta=theta,
            tau=tau,
            residual_law=law,
            size_regime="small",
            replicates=1000,
            n_perm_test=10_000,
            n_perm_search=2_000,
            methods=methods,
            label=f"{law}-tau{tau}",
        )
        for law in LAW_GRID
        for tau in TAU_GRID
    ]


def _desk_scale():
    return [
        ScenarioConfig(
            theta=0.0,
            tau=tau,
            residual_law="normal",
            size_regime="small",
            replicates=500,
            n_perm_test=1_000,
            n_perm_search=500,
            methods=TEST_METHODS,
            label=f"desk-tau{tau}",
        )
        for tau in (0.5, 1.0)
    ]


PRESETS = {
    "paper-fig1": lambda: _paper_grid(0.0, TEST_METHODS),
    "paper-fig2": lambda: _paper_grid(1.0, TEST_METHODS),
    "paper-fig3": lambda: _paper_grid(0.0, CI_METHODS),
    "paper-fig4": lambda: _paper_grid(1.0, CI_METHODS),
    "desk-scale": _desk_scale,
}


def preset_grid(name):
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}") from None
