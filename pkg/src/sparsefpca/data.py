"""Long-format ingestion, standardization and the stacked observation layout.

Observations are stacked by variable (all of variable 0, then variable 1, ...)
so that each variable's likelihood term reads one contiguous block. Subject,
variable and time indices are 0-based.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import DataError

__all__ = [
    "REQUIRED_COLUMNS",
    "ScalingRecord",
    "SparseFunctionalDataset",
    "ingest_long_csv",
    "records_from_arrays",
    "standardize",
    "apply_scaling",
    "destandardize_parameters",
]

REQUIRED_COLUMNS = ("subject", "variable", "time", "value")
TIME_MERGE_TOL = 1e-12


@dataclass
class ScalingRecord:
    """Per-variable affine standardization and the time map onto [0, 1]."""

    variables: list
    mean: np.ndarray
    sd: np.ndarray
    t_min: float
    t_max: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.sd = np.asarray(self.sd, dtype=float)
        if np.any(self.sd <= 0):
            raise DataError("scaling sd must be positive for every variable")
        if not self.t_max > self.t_min:
            raise DataError("time range must have positive length")

    @property
    def n_vars(self) -> int:
        return len(self.variables)

    def to_unit_time(self, t) -> np.ndarray:
        return (np.asarray(t, dtype=float) - self.t_min) / (self.t_max - self.t_min)

    def from_unit_time(self, u) -> np.ndarray:
        return self.t_min + np.asarray(u, dtype=float) * (self.t_max - self.t_min)

    def standardize_values(self, values, var_idx) -> np.ndarray:
        var_idx = np.asarray(var_idx)
        return (np.asarray(values, dtype=float) - self.mean[var_idx]) / self.sd[var_idx]

    def destandardize_values(self, values, var_idx) -> np.ndarray:
        var_idx = np.asarray(var_idx)
        return np.asarray(values, dtype=float) * self.sd[var_idx] + self.mean[var_idx]

    def destandardize(self, arr, axis: int = -1) -> np.ndarray:
        """Map standardized trajectories to original units along the variable ``axis``."""
        arr = np.asarray(arr, dtype=float)
        if arr.shape[axis] != self.n_vars:
            raise DataError(
                f"variable axis has length {arr.shape[axis]}, scaling record has {self.n_vars} variables"
            )
        shape = [1] * arr.ndim
        shape[axis] = self.n_vars
        return arr * self.sd.reshape(shape) + self.mean.reshape(shape)

    def to_dict(self) -> dict:
        return {
            "variables": [str(v) for v in self.variables],
            "mean": self.mean.tolist(),
            "sd": self.sd.tolist(),
            "t_min": self.t_min,
            "t_max": self.t_max,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalingRecord":
        return cls(d["variables"], np.array(d["mean"]), np.array(d["sd"]), d["t_min"], d["t_max"])

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "ScalingRecord":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SparseFunctionalDataset:
    """Stacked sparse multivariate functional observations.

    Attributes
    ----------
    y : ndarray (L,)
        Observations, contiguous per variable.
    subj : ndarray of int (L,)
        Subject index in ``0..N-1``.
    time_idx : ndarray of int (L,)
        Index into ``times``.
    var_card : ndarray of int (P,)
        Number of observations per variable.
    times : ndarray (M,)
        Pooled sorted unique observation times on [0, 1].
    """

    y: np.ndarray
    subj: np.ndarray
    time_idx: np.ndarray
    var_card: np.ndarray
    times: np.ndarray
    n_subjects: int
    n_vars: int
    subject_labels: list = field(default_factory=list)
    variable_labels: list = field(default_factory=list)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.subj = np.asarray(self.subj, dtype=np.int64)
        self.time_idx = np.asarray(self.time_idx, dtype=np.int64)
        self.var_card = np.asarray(self.var_card, dtype=np.int64)
        self.times = np.asarray(self.times, dtype=float)
        L = self.y.shape[0]
        if self.var_card.shape != (self.n_vars,) or self.var_card.sum() != L:
            raise DataError("var_card must have one entry per variable and sum to the number of observations")
        if self.subj.shape != (L,) or self.time_idx.shape != (L,):
            raise DataError("subject and time index arrays must match y in length")
        if L and (self.subj.min() < 0 or self.subj.max() >= self.n_subjects):
            raise DataError("subject index out of range")
        if L and (self.time_idx.min() < 0 or self.time_idx.max() >= len(self.times)):
            raise DataError("time index out of range")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("pooled times must be strictly ascending")
        if not self.subject_labels:
            self.subject_labels = list(range(self.n_subjects))
        if not self.variable_labels:
            self.variable_labels = list(range(self.n_vars))

    @property
    def L(self) -> int:
        return self.y.shape[0]

    @property
    def M(self) -> int:
        return self.times.shape[0]

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.var_card)[:-1]]).astype(np.int64)

    @property
    def var_idx(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_vars), self.var_card)

    def block(self, p: int) -> slice:
        s = int(self.starts[p])
        return slice(s, s + int(self.var_card[p]))

    def counts(self) -> np.ndarray:
        """Observation counts J, shape (N, P)."""
        J = np.zeros((self.n_subjects, self.n_vars), dtype=np.int64)
        np.add.at(J, (self.subj, self.var_idx), 1)
        return J

    def subject_data(self, i: int) -> list[tuple[np.ndarray, np.ndarray]]:
        """Per-variable ``(time_idx, y)`` pairs for subject ``i``."""
        out = []
        for p in range(self.n_vars):
            sl = self.block(p)
            m = self.subj[sl] == i
            out.append((self.time_idx[sl][m], self.y[sl][m]))
        return out

    def summary(self) -> dict:
        J = self.counts()
        q = [0.0, 0.25, 0.5, 0.75, 1.0]
        return {
            "N": self.n_subjects,
            "P": self.n_vars,
            "M": self.M,
            "L": self.L,
            "J_quantiles": {
                str(self.variable_labels[p]): dict(zip(["min", "q25", "median", "q75", "max"],
                                                       np.quantile(J[:, p], q).tolist()))
                for p in range(self.n_vars)
            },
        }


def ingest_long_csv(path, columns: dict | None = None) -> pd.DataFrame:
    """Read and validate a long-format CSV of ``subject,variable,time,value`` rows.

    ``columns`` optionally maps the canonical names to the file's headers.
    """
    columns = dict(columns or {})
    try:
        raw = pd.read_csv(path)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: empty file; at least one observation is required") from None
    rename = {columns.get(c, c): c for c in REQUIRED_COLUMNS}
    missing = [src for src in rename if src not in raw.columns]
    if missing:
        raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
    df = raw[list(rename)].rename(columns=rename)
    return validate_records(df, source=str(path))


def records_from_arrays(subject, variable, time, value) -> pd.DataFrame:
    df = pd.DataFrame({"subject": subject, "variable": variable, "time": time, "value": value})
    return validate_records(df)


def validate_records(df: pd.DataFrame, source: str = "records") -> pd.DataFrame:
    if len(df) == 0:
        raise DataError(f"{source}: no observations; at least one is required")
    for col in ("time", "value"):
        vals = pd.to_numeric(df[col], errors="coerce").to_numpy(dtype=float)
        bad = np.flatnonzero(~np.isfinite(vals))
        if bad.size:
            # +2: 1-based rows plus the header line
            raise DataError(f"{source}: non-finite {col} at row {bad[0] + 2}")
        df = df.assign(**{col: vals})
    dup = df.duplicated(subset=["subject", "variable", "time"], keep="first")
    if dup.any():
        row = int(np.flatnonzero(dup.to_numpy())[0])
        raise DataError(f"{source}: duplicate (subject, variable, time) at row {row + 2}")
    return df.reset_index(drop=True)


def _pool_times(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.argsort(u, kind="stable")
    su = u[order]
    new_group = np.concatenate([[True], np.diff(su) > TIME_MERGE_TOL])
    group = np.cumsum(new_group) - 1
    times = su[new_group]
    idx = np.empty_like(group)
    idx[order] = group
    return times, idx


def standardize(records: pd.DataFrame, time_range: tuple[float, float] | None = None):
    """Standardize each variable and index observations into the stacked layout.

    Parameters
    ----------
    records : DataFrame
        Validated long-format records.
    time_range : (float, float), optional
        Original-unit domain mapped onto [0, 1]. Defaults to the pooled
        minimum and maximum observed time.

    Returns
    -------
    (SparseFunctionalDataset, ScalingRecord)
    """
    df = validate_records(records)
    variables = sorted(df["variable"].unique().tolist(), key=str)
    subjects = sorted(df["subject"].unique().tolist(), key=str)
    var_code = {v: p for p, v in enumerate(variables)}

    t = df["time"].to_numpy(dtype=float)
    if time_range is None:
        t_min, t_max = float(t.min()), float(t.max())
        if t_max <= t_min:
            raise DataError("all observations share one time point; cannot map time onto [0, 1]")
    else:
        t_min, t_max = map(float, time_range)
        if t.min() < t_min or t.max() > t_max:
            raise DataError("observed times fall outside the supplied time_range")

    means, sds = [], []
    pv = df["variable"].map(var_code).to_numpy()
    vals = df["value"].to_numpy(dtype=float)
    for p, v in enumerate(variables):
        x = vals[pv == p]
        sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
        if not sd > 0:
            raise DataError(f"variable {v!r} is constant (or has one value); sd must be positive")
        means.append(float(x.mean()))
        sds.append(sd)
    scaling = ScalingRecord(variables, np.array(means), np.array(sds), t_min, t_max)
    return apply_scaling(df, scaling, subjects=subjects)


def apply_scaling(records: pd.DataFrame, scaling: ScalingRecord, subjects: list | None = None):
    """Index records using an existing ScalingRecord (e.g. new subjects for prediction)."""
    df = validate_records(records)
    var_code = {str(v): p for p, v in enumerate(scaling.variables)}
    unknown = set(df["variable"].astype(str)) - set(var_code)
    if unknown:
        raise DataError(f"unknown variable(s) {sorted(unknown)}")
    if subjects is None:
        subjects = sorted(df["subject"].unique().tolist(), key=str)
    subj_code = {s: i for i, s in enumerate(subjects)}

    pv = df["variable"].astype(str).map(var_code).to_numpy()
    si = df["subject"].map(subj_code).to_numpy()
    u = scaling.to_unit_time(df["time"].to_numpy(dtype=float))
    times, tidx = _pool_times(u)
    y = scaling.standardize_values(df["value"].to_numpy(dtype=float), pv)

    order = np.lexsort((tidx, si, pv))
    var_card = np.bincount(pv, minlength=scaling.n_vars)
    ds = SparseFunctionalDataset(
        y=y[order],
        subj=si[order],
        time_idx=tidx[order],
        var_card=var_card,
        times=times,
        n_subjects=len(subjects),
        n_vars=scaling.n_vars,
        subject_labels=list(subjects),
        variable_labels=list(scaling.variables),
    )
    return ds, scaling


def destandardize_parameters(scaling: ScalingRecord, basis, sigma2=None, w_mu=None, Psi=None) -> dict:
    """Map standardized-scale parameters to original units.

    Noise variances scale by ``sd**2``, mean weights transform affinely (the
    constant function lies in the spline span), FPC weights scale by ``sd``
    per variable block. Scaled FPC weights are in general no longer
    orthonormal; use :func:`sparsefpca.postprocess.original_scale_fpcs` for an
    orthonormal decomposition on the original scale.

    Leading axes of the inputs are treated as draw axes.
    """
    P, Q = scaling.n_vars, basis.Q
    out = {}
    if sigma2 is not None:
        sigma2 = np.asarray(sigma2, dtype=float)
        if sigma2.shape[-1] != P:
            raise DataError("sigma2 has the wrong number of variables")
        out["sigma2"] = sigma2 * scaling.sd**2
    if w_mu is not None:
        w = np.asarray(w_mu, dtype=float)
        if w.shape[-1] != P * Q:
            raise DataError("w_mu has the wrong length for the scaling record")
        ones = np.linalg.solve(basis.coeff, np.ones(Q))
        wb = w.reshape(w.shape[:-1] + (P, Q))
        wb = wb * scaling.sd[:, None] + scaling.mean[:, None] * ones
        out["w_mu"] = wb.reshape(w.shape)
    if Psi is not None:
        Psi = np.asarray(Psi, dtype=float)
        if Psi.shape[-2] != P * Q:
            raise DataError("Psi has the wrong number of rows for the scaling record")
        out["Psi"] = Psi * np.repeat(scaling.sd, Q)[:, None]
    return out
