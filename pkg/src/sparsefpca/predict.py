"""Trajectory prediction from posterior draws.

Static prediction reconstructs fitted subjects at arbitrary times. Dynamic
prediction handles a new (or partially observed) subject by drawing its
scores from their Gaussian conditional under each posterior draw, so the
population parameters are reused instead of refitting.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .basis import build_basis
from .data import ScalingRecord, validate_records
from .errors import DataError, DomainError, NumericalError

__all__ = [
    "TrajectoryDraws",
    "static_predict",
    "score_conditional_moments",
    "conditional_score_sample",
    "dynamic_predict",
    "write_predictions",
    "PREDICTION_COLUMNS",
]

log = logging.getLogger(__name__)

PREDICTION_COLUMNS = ["subject", "variable", "time", "mean", "lo95", "hi95"]
_TIME_TOL = 1e-9
SYM_TOL = 1e-10


@dataclass
class TrajectoryDraws:
    """Trajectory draws in original units.

    ``values`` has shape ``(n_draws, n_subjects, P, n_times)``; ``times`` are
    in original units.
    """

    values: np.ndarray
    times: np.ndarray
    subjects: list
    variables: list

    def mean(self) -> np.ndarray:
        return self.values.mean(axis=0)

    def interval(self, level: float = 0.95):
        a = (1.0 - level) / 2.0
        return np.quantile(self.values, a, axis=0), np.quantile(self.values, 1.0 - a, axis=0)

    def to_frame(self, level: float = 0.95) -> pd.DataFrame:
        mean = self.mean()
        lo, hi = self.interval(level)
        n_s, P, M = mean.shape
        if n_s * P * M == 0:
            return pd.DataFrame({c: [] for c in PREDICTION_COLUMNS})
        return pd.DataFrame({
            "subject": np.repeat(np.asarray(self.subjects, dtype=object), P * M),
            "variable": np.tile(np.repeat(np.asarray(self.variables, dtype=object), M), n_s),
            "time": np.tile(self.times, n_s * P),
            "mean": mean.ravel(),
            "lo95": lo.ravel(),
            "hi95": hi.ravel(),
        })


def _basis_for(draws, basis):
    if basis is not None:
        return basis
    spec = draws.basis_spec
    if not spec:
        raise DataError("draws carry no basis description; pass basis explicitly")
    return build_basis(spec["Q"], spec["degree"], spec["quad_points"])


def _scaling_for(draws, scaling) -> ScalingRecord:
    scaling = draws.scaling if scaling is None else scaling
    if scaling is None:
        raise DataError("a scaling record is required to report original units")
    return scaling


def _unit_times(times, scaling: ScalingRecord, lo=None, hi=None) -> np.ndarray:
    """Map original-unit times to [0, 1]; anything outside ``[lo, hi]`` is a domain error."""
    t = np.asarray(times, dtype=float).ravel()
    lo = scaling.t_min if lo is None else lo
    hi = scaling.t_max if hi is None else hi
    span = scaling.t_max - scaling.t_min
    bad = (t < lo - _TIME_TOL * span) | (t > hi + _TIME_TOL * span)
    if np.any(bad):
        raise DomainError(
            f"time(s) {t[bad][:5].tolist()} outside the fitted range [{lo}, {hi}]; extrapolation is not supported"
        )
    return np.clip(scaling.to_unit_time(t), 0.0, 1.0)


def _dedupe(times) -> np.ndarray:
    t = np.asarray(times, dtype=float).ravel()
    u = np.unique(t)
    if u.size < t.size:
        log.warning("dropped %d duplicate prediction time(s)", t.size - u.size)
    return u


def _param_arrays(draws):
    """Flattened ``(Psi, scores, w_mu, sigma2, lam)`` from aligned or raw draws."""
    base = getattr(draws, "draws", draws)
    return (draws.flat("Psi"), draws.flat("scores"), base.flat("w_mu"), base.flat("sigma2"), base.flat("lam"))


def _reconstruct(B, Psi, scores, w_mu, P, Q):
    """Standardized trajectories ``(S, n_subj, P, M)`` from weights and scores."""
    S = Psi.shape[0]
    M = B.shape[0]
    out = np.empty((S, scores.shape[1], P, M))
    for p in range(P):
        sl = slice(p * Q, (p + 1) * Q)
        mu = w_mu[:, sl] @ B.T  # (S, M)
        phi = np.einsum("mq,sqk->smk", B, Psi[:, sl])  # (S, M, K)
        out[:, :, p, :] = mu[:, None, :] + np.einsum("snk,smk->snm", scores, phi)
    return out


def static_predict(draws, subjects=None, times=None, scaling=None, basis=None, with_noise: bool = False,
                   rng=None) -> TrajectoryDraws:
    """Posterior draws of fitted subjects' latent trajectories at ``times``.

    Parameters
    ----------
    draws : PosteriorDraws or AlignedDraws
        Alignment does not change the result.
    subjects : list, optional
        Subject labels from the fit (default: all).
    times : array-like, optional
        Original-unit times within the fitted range (default: the fit's pooled
        observation times).
    with_noise : bool
        Add observation noise so intervals cover new measurements rather than
        the latent curve.
    """
    base = getattr(draws, "draws", draws)
    basis = _basis_for(base, basis)
    scaling = _scaling_for(base, scaling)
    labels = [str(s) for s in base.subject_labels]
    if subjects is None:
        idx = list(range(len(labels)))
        subjects = list(base.subject_labels)
    else:
        subjects = list(subjects)
        missing = [s for s in subjects if str(s) not in labels]
        if missing:
            raise DataError(f"subject(s) {missing[:5]} not present in the fit")
        idx = [labels.index(str(s)) for s in subjects]
    if times is None:
        times = scaling.from_unit_time(base.times)
    times = _dedupe(times)
    u = _unit_times(times, scaling)
    Psi, scores, w_mu, sigma2, _ = _param_arrays(draws)
    P, Q = base.model_config.P, base.model_config.Q
    B = basis.evaluate(u)
    vals = _reconstruct(B, Psi, scores[:, idx], w_mu, P, Q)
    if with_noise:
        rng = np.random.default_rng() if rng is None else rng
        vals = vals + rng.normal(size=vals.shape) * np.sqrt(sigma2)[:, None, :, None]
    vals = scaling.destandardize(vals, axis=2)
    return TrajectoryDraws(vals, times, subjects, list(scaling.variables))


# ---------------------------------------------------------------------------
# dynamic prediction


def _new_subject_obs(records: pd.DataFrame, scaling: ScalingRecord):
    """Standardized per-variable ``(unit times, values)`` for one subject's records."""
    if len(records) == 0:
        return [(np.zeros(0), np.zeros(0)) for _ in range(scaling.n_vars)]
    df = validate_records(records)
    names = [str(v) for v in scaling.variables]
    unknown = set(df["variable"].astype(str)) - set(names)
    if unknown:
        raise DataError(f"unknown variable(s) {sorted(unknown)}")
    out = []
    for p, name in enumerate(names):
        sub = df[df["variable"].astype(str) == name].sort_values("time")
        u = _unit_times(sub["time"].to_numpy(), scaling)
        y = scaling.standardize_values(sub["value"].to_numpy(), np.full(len(sub), p))
        out.append((u, y))
    return out


def score_conditional_moments(obs, Psi, w_mu, sigma2, lam, basis):
    """Conditional mean and covariance of one subject's scores for each draw.

    ``obs`` is a per-variable list of ``(unit times, standardized values)``.
    Parameter arrays carry a leading draw axis. Returns ``(mean (S, K),
    cov (S, K, K))``.
    """
    S, PQ, K = Psi.shape
    P = len(obs)
    Q = PQ // P
    prec = np.zeros((S, K, K))
    prec[:, np.arange(K), np.arange(K)] = 1.0 / lam
    rhs = np.zeros((S, K))
    for p, (u, y) in enumerate(obs):
        if len(u) == 0:
            continue
        sl = slice(p * Q, (p + 1) * Q)
        B = basis.evaluate(u)
        Phi = np.einsum("jq,sqk->sjk", B, Psi[:, sl])
        R = y[None, :] - w_mu[:, sl] @ B.T
        s2 = sigma2[:, p][:, None, None]
        prec += np.einsum("sjk,sjl->skl", Phi, Phi) / s2
        rhs += np.einsum("sjk,sj->sk", Phi, R) / sigma2[:, p][:, None]
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    cov = np.linalg.inv(prec)
    asym = np.max(np.abs(cov - np.swapaxes(cov, 1, 2))) if S else 0.0
    if asym > SYM_TOL * max(float(np.max(np.abs(cov))) if S else 1.0, 1.0):
        raise NumericalError(f"score covariance asymmetric by {asym:.3g}")
    cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    mean = np.einsum("skl,sl->sk", cov, rhs)
    return mean, cov


def conditional_score_sample(new_data: pd.DataFrame, draws, basis=None, scaling=None, rng=None) -> np.ndarray:
    """Draw a new subject's scores once per posterior draw.

    For posterior draw ``n`` the scores are drawn from the Gaussian with
    precision ``sum_p Phi_p^T Phi_p / sigma2_p + Lambda^{-1}`` and mean
    ``Sigma sum_p Phi_p^T (y_p - mu_p) / sigma2_p`` under that draw's
    parameters. Returns an ``(S, K)`` array; for aligned draws the scores
    are rotated to match the aligned FPCs.

    Parameters
    ----------
    new_data : DataFrame
        The subject's long-format records in original units (``subject``
        column optional).
    """
    base = getattr(draws, "draws", draws)
    basis = _basis_for(base, basis)
    scaling = _scaling_for(base, scaling)
    rng = np.random.default_rng() if rng is None else rng
    rec = new_data if "subject" in new_data.columns else new_data.assign(subject=0)
    obs = _new_subject_obs(rec, scaling)
    # condition in the eigen-ordered frame where the score prior is diagonal
    Psi, _, w_mu, sigma2, lam = _param_arrays(base)
    mean, cov = score_conditional_moments(obs, Psi, w_mu, sigma2, lam, basis)
    S, K = mean.shape
    out = np.empty((S, K))
    for n in range(S):
        L = np.linalg.cholesky(cov[n])
        out[n] = mean[n] + L @ rng.normal(size=K)
    if base is not draws:
        out = np.einsum("sk,skj->sj", out, draws.flat("rotations"))
    return out


def dynamic_predict(new_data: pd.DataFrame, cutoff: float, horizon: float, draws, basis=None, scaling=None,
                    times=None, rng=None, with_noise: bool = False) -> TrajectoryDraws:
    """Predict a new subject over ``[first observation, cutoff + horizon]`` from data up to ``cutoff``.

    Observations after ``cutoff`` are ignored. Prediction times default to
    the fit's pooled times inside the window (plus the window ends).
    """
    base = getattr(draws, "draws", draws)
    basis = _basis_for(base, basis)
    scaling = _scaling_for(base, scaling)
    rng = np.random.default_rng() if rng is None else rng
    if horizon < 0:
        raise DomainError("horizon must be non-negative")
    rec = new_data if "subject" in new_data.columns else new_data.assign(subject=0)
    if len(rec):
        rec = validate_records(rec)
        subj = rec["subject"].unique()
        if subj.size > 1:
            raise DataError("dynamic prediction takes one subject at a time")
        label = subj[0]
        t_obs = rec["time"].to_numpy(dtype=float)
        if cutoff < t_obs.min():
            raise DomainError("cutoff precedes the subject's first observation")
        start = float(t_obs.min())
        rec = rec[rec["time"] <= cutoff]
    else:
        label, start = "new", float(scaling.t_min)
    end = cutoff + horizon
    span = scaling.t_max - scaling.t_min
    if end > scaling.t_max + _TIME_TOL * span:
        raise DomainError(f"cutoff + horizon = {end} exceeds the fitted range end {scaling.t_max}")
    end = min(end, scaling.t_max)
    if times is None:
        grid = scaling.from_unit_time(base.times)
        times = np.concatenate([[start], grid[(grid > start) & (grid < end)], [end]])
    times = _dedupe(times)
    _unit_times(times, scaling, lo=scaling.t_min, hi=end)
    xi = conditional_score_sample(rec, draws, basis, scaling, rng)
    Psi, _, w_mu, sigma2, _ = _param_arrays(draws)
    P, Q = base.model_config.P, base.model_config.Q
    B = basis.evaluate(_unit_times(times, scaling))
    vals = _reconstruct(B, Psi, xi[:, None, :], w_mu, P, Q)
    if with_noise:
        vals = vals + rng.normal(size=vals.shape) * np.sqrt(sigma2)[:, None, :, None]
    vals = scaling.destandardize(vals, axis=2)
    return TrajectoryDraws(vals, times, [label], list(scaling.variables))


def write_predictions(path, traj: TrajectoryDraws, level: float = 0.95) -> pd.DataFrame:
    df = traj.to_frame(level)
    df.to_csv(path, index=False, float_format="%.10g")
    return df
