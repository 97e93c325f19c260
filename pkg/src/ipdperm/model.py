"""Data model for IPD meta-analysis under a stratified-intercept mixed model.

The outcome of patient j in study i is modelled as

    y_ij = b0_i + b1_i * y0_ij + u_i * z_ij + e_ij,
    u_i ~ N(theta, tau^2),   e_ij ~ N(0, sigma_i^2),

with a separate intercept b0_i and baseline slope b1_i per study, a random
treatment effect u_i, and study-specific residual variance sigma_i^2.
Marginally the residual vector eps0 = Z u0 + e has covariance

    Sigma = tau^2 Z Z^T + R,

which is block-diagonal by study with blocks sigma_i^2 I + tau^2 z_i z_i^T.
This module holds the dataset container, the fixed/random design matrices,
and the blockwise covariance and its upper-triangular Cholesky factor W
(Sigma = W^T W).  Everything is immutable after construction and safe to
share between worker processes.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import DataError, FactorizationError, NonIdentifiableError

MIN_STUDY_SIZE = 3  # stratified intercept + slope + at least one residual df


def _as_readonly(arr):
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


class IpdDataset:
    """Patient-level records, canonicalized so each study's rows are contiguous.

    Study labels are mapped to indices 0..k-1 in first-appearance order; rows
    are regrouped by study (stable within a study) so that the marginal
    covariance is block-diagonal along `study_blocks`.

    Attributes:
        y: outcomes, shape (n,).
        y0: baseline values, shape (n,).
        z: treatment indicators in {0, 1}, shape (n,).
        study_index: 0-based study index per row, shape (n,).
        study_labels: original labels, length k, in first-appearance order.
        starts: row offsets of the k study blocks, shape (k + 1,).
    """

    def __init__(self, study_index, y, y0, z, study_labels, *, _canonical=False):
        study_index = np.asarray(study_index, dtype=np.int64)
        y = np.asarray(y, dtype=np.float64)
        y0 = np.asarray(y0, dtype=np.float64)
        z = np.asarray(z, dtype=np.int64)
        if not (study_index.shape == y.shape == y0.shape == z.shape):
            raise DataError("study, y, y0, z must have identical lengths")
        if y.ndim != 1 or y.size == 0:
            raise DataError("dataset must contain at least one record")
        if not _canonical:
            order = np.argsort(study_index, kind="stable")
            study_index = study_index[order]
            y, y0, z = y[order], y0[order], z[order]
        self.study_index = _as_readonly(study_index)
        self.y = _as_readonly(y)
        self.y0 = _as_readonly(y0)
        self.z = _as_readonly(z)
        self.z_float = _as_readonly(z.astype(np.float64))
        self.study_labels = tuple(str(s) for s in study_labels)
        self.k = len(self.study_labels)
        counts = np.bincount(study_index, minlength=self.k)
        self.n_i = _as_readonly(counts)
        self.starts = _as_readonly(np.concatenate(([0], np.cumsum(counts))))
        self._validate()
        # Per-study cross-products of the design columns [1, y0, z]; reused by
        # every likelihood evaluation.
        self.design_crossprods = _as_readonly(_design_crossprods(self))

    @property
    def n(self):
        return self.y.size

    @property
    def study_blocks(self):
        return [slice(self.starts[i], self.starts[i + 1]) for i in range(self.k)]

    @property
    def n_treated(self):
        out = np.array(
            [int(self.z[self.starts[i] : self.starts[i + 1]].sum()) for i in range(self.k)]
        )
        return out

    def _validate(self):
        if self.k < 1:
            raise DataError("dataset must contain at least one study")
        if np.any(self.study_index < 0) or np.any(self.study_index >= self.k):
            raise DataError("study indices out of range")
        if not np.all(np.isfinite(self.y)):
            raise DataError("non-finite outcome values present")
        if not np.all(np.isfinite(self.y0)):
            raise DataError("non-finite baseline values present")
        bad_z = ~np.isin(self.z, (0, 1))
        if np.any(bad_z):
            raise DataError(f"treatment indicator must be 0 or 1 (row {int(np.nonzero(bad_z)[0][0])})")
        small = np.nonzero(self.n_i < MIN_STUDY_SIZE)[0]
        if small.size:
            raise DataError(
                f"study '{self.study_labels[small[0]]}' has {int(self.n_i[small[0]])} "
                f"patients; at least {MIN_STUDY_SIZE} are required"
            )
        for i in range(self.k):
            zi = self.z[self.starts[i] : self.starts[i + 1]]
            if zi.min() == zi.max():
                arm = "treated" if zi[0] == 1 else "control"
                raise NonIdentifiableError(
                    f"study '{self.study_labels[i]}' contains only {arm} patients"
                )

    @classmethod
    def from_arrays(cls, study, y, y0, z):
        """Build a dataset from parallel arrays; `study` holds arbitrary labels."""
        study = np.asarray(study)
        labels = []
        index_of = {}
        idx = np.empty(study.shape[0], dtype=np.int64)
        for row, lab in enumerate(study):
            key = str(lab)
            if key not in index_of:
                index_of[key] = len(labels)
                labels.append(key)
            idx[row] = index_of[key]
        return cls(idx, y, y0, z, labels)

    @classmethod
    def from_csv(cls, path):
        """Read the documented CSV schema: header `study,y,y0,z`.

        `study` may be any label (mapped to 1..k in first-appearance order),
        `z` must be 0 or 1.  Raises DataError with row/column diagnostics.
        """
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: empty file") from None
            header = [h.strip().lower() for h in header]
            required = ["study", "y", "y0", "z"]
            missing = [c for c in required if c not in header]
            if missing:
                raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
            cols = {c: header.index(c) for c in required}
            study, y, y0, z = [], [], [], []
            for lineno, row in enumerate(reader, start=2):
                if not row or all(not c.strip() for c in row):
                    continue
                if len(row) < len(header):
                    raise DataError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
                study.append(row[cols["study"]].strip())
                for name, dest in (("y", y), ("y0", y0)):
                    raw = row[cols[name]].strip()
                    try:
                        val = float(raw)
                    except ValueError:
                        raise DataError(f"{path}:{lineno}: column '{name}' is not numeric: {raw!r}") from None
                    if not math.isfinite(val):
                        raise DataError(f"{path}:{lineno}: column '{name}' is not finite: {raw!r}")
                    dest.append(val)
                raw_z = row[cols["z"]].strip()
                if raw_z not in ("0", "1"):
                    raise DataError(f"{path}:{lineno}: column 'z' must be 0 or 1, got {raw_z!r}")
                z.append(int(raw_z))
        if not study:
            raise DataError(f"{path}: no data rows")
        return cls.from_arrays(study, y, y0, z)

    def with_outcome(self, y_new):
        """Return a copy with outcomes replaced (same design, same ordering)."""
        y_new = np.asarray(y_new, dtype=np.float64)
        if y_new.shape != self.y.shape:
            raise DataError("replacement outcome vector has wrong length")
        return IpdDataset(self.study_index, y_new, self.y0, self.z, self.study_labels, _canonical=True)

    def summary(self):
        return {
            "k": self.k,
            "n_total": int(self.n),
            "studies": [
                {
                    "label": self.study_labels[i],
                    "n": int(self.n_i[i]),
                    "n_treated": int(self.n_treated[i]),
                }
                for i in range(self.k)
            ],
        }


def _design_crossprods(dataset):
    """Per-study D_i^T D_i for the 3-column within-study design D_i = [1, y0, z]."""
    k = dataset.k
    out = np.empty((k, 3, 3))
    for i in range(k):
        sl = slice(dataset.starts[i], dataset.starts[i + 1])
        d = np.column_stack(
            [np.ones(dataset.n_i[i]), dataset.y0[sl], dataset.z[sl].astype(np.float64)]
        )
        out[i] = d.T @ d
    return out


@dataclass(frozen=True)
class DesignMatrices:
    """Fixed-effects matrix X, treatment-indicator matrix Z, and study blocks.

    X is (n x 2k) with the stratified intercept columns first and the
    stratified baseline-slope columns after, so the coefficient layout is
    (b0_1..b0_k, b1_1..b1_k).  Z is (n x k) with z_ij in column i.
    """

    X: np.ndarray
    Z: np.ndarray
    study_blocks: list = field(repr=False)

    @property
    def treatment_column(self):
        return self.Z.sum(axis=1)


def build_design(dataset):
    """Assemble X and Z from a canonical dataset.

    Raises NonIdentifiableError when a study has a single arm (such a study
    cannot separate its intercept from the treatment contrast).
    """
    n, k = dataset.n, dataset.k
    X = np.zeros((n, 2 * k))
    Z = np.zeros((n, k))
    for i in range(k):
        sl = slice(dataset.starts[i], dataset.starts[i + 1])
        zi = dataset.z[sl]
        if zi.size and zi.min() == zi.max():
            raise NonIdentifiableError(
                f"study '{dataset.study_labels[i]}' has a single arm; design is not identifiable"
            )
        X[sl, i] = 1.0
        X[sl, k + i] = dataset.y0[sl]
        Z[sl, i] = zi
    return DesignMatrices(X=_as_readonly(X), Z=_as_readonly(Z), study_blocks=dataset.study_blocks)


@dataclass(frozen=True)
class VarianceComponents:
    """Between-study variance tau^2 and the k per-study residual variances."""

    tau2: float
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "sigma2", _as_readonly(np.asarray(self.sigma2, dtype=np.float64)))
        if self.tau2 < 0:
            raise ValueError(f"tau2 must be nonnegative, got {self.tau2}")
        if np.any(self.sigma2 <= 0) or not np.all(np.isfinite(self.sigma2)):
            raise ValueError("all residual variances must be positive and finite")

    @classmethod
    def equal(cls, tau2, sigma2, k):
        return cls(tau2=float(tau2), sigma2=np.full(k, float(sigma2)))

    @property
    def is_equal(self):
        return bool(np.all(self.sigma2 == self.sigma2[0]))


@dataclass(frozen=True)
class Covariance:
    """Marginal residual covariance, stored as per-study dense blocks only."""

    blocks: tuple
    study_blocks: list = field(repr=False)


def marginal_covariance(vc, design):
    """Blocks of Sigma = tau^2 Z Z^T + R.

    Within study i the (a, b) entry is tau^2 * z_a * z_b + sigma_i^2 * 1{a=b};
    control patients therefore contribute only diagonal entries.
    """
    blocks = []
    for i, sl in enumerate(design.study_blocks):
        zi = design.Z[sl, i]
        block = vc.tau2 * np.outer(zi, zi)
        block[np.diag_indices_from(block)] += vc.sigma2[i]
        blocks.append(_as_readonly(block))
    return Covariance(blocks=tuple(blocks), study_blocks=design.study_blocks)


@dataclass(frozen=True)
class Factor:
    """Blockwise upper-triangular W with Sigma = W^T W."""

    blocks: tuple
    study_blocks: list = field(repr=False)

    def whiten(self, r):
        """Apply (W^T)^{-1} blockwise (forward substitution per study)."""
        out = np.empty_like(r, dtype=np.float64)
        for w, sl in zip(self.blocks, self.study_blocks):
            out[sl] = scipy.linalg.solve_triangular(w, r[sl], trans="T", lower=False)
        return out

    def color(self, e):
        """Apply W^T blockwise (inverse of whiten)."""
        out = np.empty_like(e, dtype=np.float64)
        for w, sl in zip(self.blocks, self.study_blocks):
            out[sl] = w.T @ e[sl]
        return out


def example_dataset_path():
    """Path to the bundled synthetic example (k=4, study sizes 15/14/22/54)."""
    import importlib.resources

    return str(importlib.resources.files("ipdperm").joinpath("datasets/synthetic_ipd.csv"))


def upper_triangular_factor(cov):
    """Blockwise upper Cholesky factor of a block-diagonal covariance.

    Raises FactorizationError when a block is not positive definite, which
    signals a tau2/sigma2 pathology upstream.
    """
    factors = []
    for i, block in enumerate(cov.blocks):
        try:
            w = scipy.linalg.cholesky(block, lower=False)
        except scipy.linalg.LinAlgError as exc:
            raise FactorizationError(f"covariance block {i} is not positive definite: {exc}") from None
        factors.append(_as_readonly(w))
    return Factor(blocks=tuple(factors), study_blocks=cov.study_blocks)
