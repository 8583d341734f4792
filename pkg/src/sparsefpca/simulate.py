"""Synthetic data generators, accuracy metrics and replicated studies."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from .basis import build_basis
from .data import standardize
from .errors import ConfigurationError
from .model import ModelConfig
from .postprocess import (convergence_summary, default_reference, original_scale_fpcs, procrustes_align,
                          procrustes_rotation)
from .predict import static_predict
from .sampler import SamplerConfig, run, save_draws

__all__ = [
    "SimScenario",
    "SimTruth",
    "multivariate_truth",
    "univariate_truth",
    "generate_multivariate",
    "generate_univariate",
    "quadrature_weights",
    "subject_means",
    "ise",
    "rise",
    "component_ise",
    "coverage",
    "align_to_truth",
    "EngineConfig",
    "StudyReport",
    "replicate_seeds",
    "run_replicate",
    "run_study",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimScenario:
    """Settings for one synthetic design.

    ``kind`` is ``"multivariate"`` or ``"univariate"``; the univariate design
    forces ``P = 1``. ``snr`` may be a scalar or one value per variable.
    """

    kind: str = "univariate"
    P: int = 1
    K_true: int = 3
    I: int = 100
    M_grid: int = 100
    obs_range: tuple = (5, 15)
    snr: float | tuple = 5.0
    eigenvalues: tuple | None = None
    seed: int = 0
    n_replicates: int = 20

    def __post_init__(self):
        if self.kind not in ("multivariate", "univariate"):
            raise ConfigurationError("kind must be 'multivariate' or 'univariate'")
        if self.kind == "univariate" and self.P != 1:
            raise ConfigurationError("univariate scenarios have P = 1")
        if self.kind == "univariate" and self.K_true > 3:
            raise ConfigurationError("the univariate design defines three components")
        lo, hi = self.obs_range
        if not (1 <= lo <= hi <= self.M_grid):
            raise ConfigurationError("obs_range must lie within [1, M_grid]")
        if np.any(np.asarray(self.snr, dtype=float) <= 0):
            raise ConfigurationError("snr must be positive")
        if np.size(self.snr) not in (1, self.P):
            raise ConfigurationError("snr needs one value or one per variable")
        lam = self.lambdas
        if lam.size != self.K_true or np.any(lam <= 0) or np.any(np.diff(lam) > 0):
            raise ConfigurationError("eigenvalues must be K_true positive values in descending order")
        if self.I < 1 or self.n_replicates < 1:
            raise ConfigurationError("I and n_replicates must be positive")

    @property
    def lambdas(self) -> np.ndarray:
        if self.eigenvalues is None:
            return 0.5 ** np.arange(self.K_true)
        return np.asarray(self.eigenvalues, dtype=float)

    @property
    def sigma2(self) -> np.ndarray:
        snr = np.broadcast_to(np.asarray(self.snr, dtype=float), (self.P,))
        return self.lambdas.sum() / snr

    @property
    def grid(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.M_grid)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["obs_range"] = list(self.obs_range)
        if isinstance(self.snr, tuple):
            d["snr"] = list(self.snr)
        if self.eigenvalues is not None:
            d["eigenvalues"] = list(self.eigenvalues)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimScenario":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigurationError(f"unknown scenario keys: {sorted(extra)}")
        d = dict(d)
        if "obs_range" in d:
            d["obs_range"] = tuple(d["obs_range"])
        if isinstance(d.get("snr"), list):
            d["snr"] = tuple(d["snr"])
        if d.get("eigenvalues") is not None:
            d["eigenvalues"] = tuple(d["eigenvalues"])
        return cls(**d)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "SimScenario":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SimTruth:
    """Latent truth on the grid; arrays indexed ``[p, m]``, ``[k, p, m]`` and ``[i, p, m]``."""

    grid: np.ndarray
    mu: np.ndarray
    phi: np.ndarray
    scores: np.ndarray
    lambdas: np.ndarray
    sigma2: np.ndarray
    Y: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.Y is None:
            self.Y = self.mu[None] + np.einsum("ik,kpm->ipm", self.scores, self.phi)


def multivariate_truth(t, P: int, K: int):
    """Mean ``(P, M)`` and FPCs ``(K, P, M)`` of the multivariate design."""
    t = np.asarray(t, dtype=float)
    mu = np.empty((P, t.size))
    phi = np.empty((K, P, t.size))
    for p in range(1, P + 1):
        sgn = (-1.0) ** p
        mu[p - 1] = sgn * 2.0 * np.sin((2.0 * np.pi + p) * t)
        for k in range(1, K + 1):
            freq = 2.0 * ((k - 1) // 2 + 1) * np.pi
            trig = np.sin if k % 2 == 1 else np.cos
            phi[k - 1, p - 1] = sgn * np.sqrt(2.0 / P) * trig(freq * t)
    return mu, phi


def univariate_truth(t, K: int = 3):
    t = np.asarray(t, dtype=float)
    mu = (5.0 * np.sin(2.0 * np.pi * t))[None]
    r2 = np.sqrt(2.0)
    phi = np.stack([r2 * np.sin(2 * np.pi * t), r2 * np.cos(4 * np.pi * t), r2 * np.sin(4 * np.pi * t)])[:K, None]
    return mu, phi


def _generate(scenario: SimScenario, mu, phi, rng_seed):
    """Draw scores, subsample the grid and add noise; returns ``(records, truth)``."""
    P, I, M = scenario.P, scenario.I, scenario.M_grid
    lam, s2 = scenario.lambdas, scenario.sigma2
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    score_ss, obs_ss = ss.spawn(2)
    scores = np.random.default_rng(score_ss).normal(size=(I, lam.size)) * np.sqrt(lam)
    truth = SimTruth(scenario.grid, mu, phi, scores, lam, s2)
    lo, hi = scenario.obs_range
    # independent substream per (subject, variable)
    subs = obs_ss.spawn(I * P)
    rows = []
    for i in range(I):
        for p in range(P):
            rng = np.random.default_rng(subs[i * P + p])
            J = int(rng.integers(lo, hi + 1))
            idx = np.sort(rng.choice(M, size=J, replace=False))
            y = truth.Y[i, p, idx] + rng.normal(size=J) * np.sqrt(s2[p])
            for m, v in zip(idx, y):
                rows.append((i, p, m, v))
    arr = np.array(rows, dtype=float).reshape(-1, 4)
    records = pd.DataFrame({
        "subject": arr[:, 0].astype(int),
        "variable": arr[:, 1].astype(int),
        "time": scenario.grid[arr[:, 2].astype(int)],
        "value": arr[:, 3],
    })
    return records, truth


def generate_multivariate(scenario: SimScenario, seed=None):
    """Records and truth for the multivariate design."""
    mu, phi = multivariate_truth(scenario.grid, scenario.P, scenario.K_true)
    return _generate(scenario, mu, phi, scenario.seed if seed is None else seed)


def generate_univariate(scenario: SimScenario, seed=None):
    """Records and truth for the univariate design."""
    if scenario.P != 1:
        raise ConfigurationError("univariate generator needs P = 1")
    mu, phi = univariate_truth(scenario.grid, scenario.K_true)
    return _generate(scenario, mu, phi, scenario.seed if seed is None else seed)


# ---------------------------------------------------------------------------
# metrics


def quadrature_weights(M: int) -> np.ndarray:
    """Uniform weights ``1/M`` on the equally spaced grid."""
    return np.full(M, 1.0 / M)


def subject_means(records: pd.DataFrame, subjects, variables) -> np.ndarray:
    """Per-subject, per-variable mean of the observed values; ``nan`` where nothing was observed."""
    out = np.full((len(subjects), len(variables)), np.nan)
    g = records.groupby(["subject", "variable"])["value"].mean()
    si = {s: i for i, s in enumerate(subjects)}
    vi = {v: p for p, v in enumerate(variables)}
    for (s, v), m in g.items():
        if s in si and v in vi:
            out[si[s], vi[v]] = m
    return out


def ise(estimate, truth, weights=None) -> np.ndarray:
    """Quadrature of the squared error over the last axis."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    w = quadrature_weights(truth.shape[-1]) if weights is None else np.asarray(weights, dtype=float)
    return np.sum((estimate - truth) ** 2 * w, axis=-1)


def rise(pred, truth_Y, obs_means, weights=None) -> dict:
    """Relative ISE per variable against the subject-mean baseline.

    Parameters
    ----------
    pred, truth_Y : ndarray (I, P, M)
        Predicted and true trajectories on the grid.
    obs_means : ndarray (I, P)
        Mean of each subject's observations; ``nan`` where a subject has no
        observations of a variable. Such subject-variable pairs are left out
        of both numerator and denominator.

    Returns
    -------
    dict with ``rise``, ``ise_method``, ``ise_mean`` (each length P) and
    ``n_excluded`` per variable.
    """
    pred = np.asarray(pred, dtype=float)
    truth_Y = np.asarray(truth_Y, dtype=float)
    keep = np.isfinite(obs_means)
    e_method = ise(pred, truth_Y, weights)  # (I, P)
    e_mean = ise(np.where(keep, obs_means, 0.0)[..., None], truth_Y, weights)
    P = truth_Y.shape[1]
    num = np.array([e_method[keep[:, p], p].mean() if keep[:, p].any() else np.nan for p in range(P)])
    den = np.array([e_mean[keep[:, p], p].mean() if keep[:, p].any() else np.nan for p in range(P)])
    return {"rise": num / den, "ise_method": num, "ise_mean": den, "n_excluded": (~keep).sum(axis=0)}


def component_ise(estimate, truth, weights=None) -> float:
    """ISE of one estimated function against the truth on the grid."""
    return float(ise(estimate, truth, weights))


def coverage(lo, hi, truth) -> float:
    """Fraction of points where ``lo <= truth <= hi``."""
    lo, hi, truth = (np.asarray(a, dtype=float) for a in (lo, hi, truth))
    return float(np.mean((lo <= truth) & (truth <= hi)))


def align_to_truth(Phi_draws: np.ndarray, phi_true: np.ndarray) -> np.ndarray:
    """Procrustes-rotate evaluated FPC draws ``(S, PM, K)`` toward the truth ``(PM, K)``."""
    out = np.empty_like(Phi_draws)
    for s in range(Phi_draws.shape[0]):
        R, _ = procrustes_rotation(Phi_draws[s], phi_true)
        out[s] = Phi_draws[s] @ R
    return out


# ---------------------------------------------------------------------------
# studies


@dataclass(frozen=True)
class EngineConfig:
    """Model and sampler settings used for every replicate of a study."""

    Q: int = 20
    K: int = 3
    degree: int = 3
    alpha: float = 0.1
    n_chains: int = 2
    n_warmup: int = 500
    n_samples: int = 500
    mode: str = "blocked-gibbs"
    target_accept: float = 0.8
    max_depth: int = 10

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigurationError(f"unknown engine keys: {sorted(extra)}")
        return cls(**d)


@dataclass
class StudyReport:
    """Long-format tables of a replicated study plus a JSON-ready summary."""

    rise: pd.DataFrame
    ise_components: pd.DataFrame
    coverage: pd.DataFrame
    timing: pd.DataFrame
    replicates: list
    failures: list
    scenario: SimScenario
    engine: EngineConfig

    def summary(self) -> dict:
        cov = self.coverage.groupby(["target", "variable"])["coverage"].mean()
        rise_mean = self.rise.groupby("variable")["rise"].mean()
        ise_mean = self.ise_components.groupby(["component", "variable"])["ise"].mean()
        return {
            "scenario": self.scenario.to_dict(),
            "engine": self.engine.to_dict(),
            "n_completed": len(self.replicates),
            "failures": self.failures,
            "mean_rise": {str(k): float(v) for k, v in rise_mean.items()},
            "max_rise": float(self.rise["rise"].max()) if len(self.rise) else None,
            "mean_coverage": {f"{t}/{v}": float(c) for (t, v), c in cov.items()},
            "mean_component_ise": {f"{c}/{v}": float(x) for (c, v), x in ise_mean.items()},
            "replicates": self.replicates,
        }

    def write(self, outdir) -> None:
        os.makedirs(outdir, exist_ok=True)
        self.rise.to_csv(os.path.join(outdir, "rise.csv"), index=False, float_format="%.17g")
        self.ise_components.to_csv(os.path.join(outdir, "ise_components.csv"), index=False, float_format="%.17g")
        self.coverage.to_csv(os.path.join(outdir, "coverage.csv"), index=False, float_format="%.17g")
        self.timing.to_csv(os.path.join(outdir, "timing.csv"), index=False, float_format="%.6f")
        with open(os.path.join(outdir, "summary.json"), "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def replicate_seeds(seed: int, n: int) -> list[tuple[np.random.SeedSequence, int]]:
    """``(data seed sequence, sampler seed)`` for each replicate."""
    out = []
    for child in np.random.SeedSequence(seed).spawn(n):
        data_ss, samp_ss = child.spawn(2)
        out.append((data_ss, int(samp_ss.generate_state(1)[0])))
    return out


def run_replicate(scenario: SimScenario, engine: EngineConfig, b: int, draws_dir=None) -> dict:
    """Generate, fit, align, predict and score one replicate."""

    data_ss, samp_seed = replicate_seeds(scenario.seed, scenario.n_replicates)[b]
    gen = generate_univariate if scenario.kind == "univariate" else generate_multivariate
    records, truth = gen(scenario, seed=data_ss)
    t0 = time.perf_counter()
    data, scaling = standardize(records, time_range=(0.0, 1.0))
    basis = build_basis(engine.Q, engine.degree)
    mc = ModelConfig(K=engine.K, Q=engine.Q, P=scenario.P, alpha=engine.alpha)
    sc = SamplerConfig(n_chains=engine.n_chains, n_warmup=engine.n_warmup, n_samples=engine.n_samples,
                       seed=samp_seed, mode=engine.mode, target_accept=engine.target_accept,
                       max_depth=engine.max_depth)
    draws = run(sc, data, basis, mc, scaling)
    elapsed = time.perf_counter() - t0
    if draws_dir is not None:
        save_draws(draws, os.path.join(draws_dir, f"rep_{b + 1:04d}"))

    grid = scenario.grid
    P, M = scenario.P, grid.size
    variables = list(scaling.variables)
    subj_idx = np.array([int(s) for s in draws.subject_labels])
    Y_true = truth.Y[subj_idx]  # fit order
    traj = static_predict(draws, times=grid, scaling=scaling, basis=basis)
    mean = traj.mean()
    lo, hi = traj.interval()
    obs_means = subject_means(records, list(draws.subject_labels), variables)
    r = rise(mean, Y_true, obs_means)
    out = {"replicate": b + 1, "seconds": elapsed, "rise": [], "ise": [], "coverage": []}
    for p in range(P):
        out["rise"].append({"replicate": b + 1, "variable": variables[p], "rise": r["rise"][p],
                            "ise_method": r["ise_method"][p], "ise_mean": r["ise_mean"][p],
                            "n_excluded": int(r["n_excluded"][p])})
        out["coverage"].append({"replicate": b + 1, "target": "trajectory", "variable": variables[p],
                                "coverage": coverage(lo[:, p], hi[:, p], Y_true[:, p])})

    B = basis.evaluate(grid)
    Q = engine.Q
    # mean functions in original units
    w = draws.flat("w_mu")
    for p in range(P):
        mu_draws = (w[:, p * Q:(p + 1) * Q] @ B.T) * scaling.sd[p] + scaling.mean[p]
        est = mu_draws.mean(axis=0)
        mlo, mhi = np.quantile(mu_draws, [0.025, 0.975], axis=0)
        out["ise"].append({"replicate": b + 1, "component": "mu", "variable": variables[p],
                           "ise": component_ise(est, truth.mu[p])})
        out["coverage"].append({"replicate": b + 1, "target": "mu", "variable": variables[p],
                                "coverage": coverage(mlo, mhi, truth.mu[p])})
    # FPCs on the original scale, aligned to the truth
    if engine.K == scenario.K_true:
        Psi_o, _, _ = original_scale_fpcs(draws)
        E = np.kron(np.eye(P), B)
        Phi = np.einsum("mq,sqk->smk", E, Psi_o)
        phi_true = np.transpose(truth.phi, (1, 2, 0)).reshape(P * M, engine.K)
        Phi = align_to_truth(Phi, phi_true)
        U, _, Vt = np.linalg.svd(Phi.mean(axis=0) * np.sqrt(1.0 / M), full_matrices=False)
        Phi_hat = (U @ Vt) / np.sqrt(1.0 / M)
        flo, fhi = np.quantile(Phi, [0.025, 0.975], axis=0)
        for k in range(engine.K):
            for p in range(P):
                sl = slice(p * M, (p + 1) * M)
                out["ise"].append({"replicate": b + 1, "component": f"phi{k + 1}", "variable": variables[p],
                                   "ise": component_ise(Phi_hat[sl, k], phi_true[sl, k])})
                out["coverage"].append({"replicate": b + 1, "target": f"phi{k + 1}", "variable": variables[p],
                                        "coverage": coverage(flo[sl, k], fhi[sl, k], phi_true[sl, k])})
    aligned = procrustes_align(draws, default_reference(draws, basis), basis)
    conv = convergence_summary(aligned)
    out["diagnostics"] = {
        "replicate": b + 1,
        "max_rhat": conv["max_rhat"],
        "rhat_groups": {k: v["max_rhat"] for k, v in conv["groups"].items()},
        **draws.diagnostics(),
    }
    return out


def _run_one(args):
    scenario, engine, b, draws_dir = args
    try:
        return run_replicate(scenario, engine, b, draws_dir)
    except Exception as exc:  # recorded, the study carries on
        log.exception("replicate %d failed", b + 1)
        return {"replicate": b + 1, "error": f"{type(exc).__name__}: {exc}"}


def run_study(scenario: SimScenario, engine: EngineConfig | None = None, outdir=None, save_draws: bool = False,
              workers: int = 1) -> StudyReport:
    """Replicated generate, fit, align, predict and score pipeline.

    Each replicate owns independent data and sampler streams spawned from
    ``scenario.seed``, so the report does not depend on ``workers``.
    """
    engine = EngineConfig() if engine is None else engine
    draws_dir = os.path.join(outdir, "draws") if (outdir is not None and save_draws) else None
    jobs = [(scenario, engine, b, draws_dir) for b in range(scenario.n_replicates)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    ok = [r for r in results if "error" not in r]
    failures = [r for r in results if "error" in r]
    cols_r = ["replicate", "variable", "rise", "ise_method", "ise_mean", "n_excluded"]
    report = StudyReport(
        rise=pd.DataFrame([x for r in ok for x in r["rise"]], columns=cols_r),
        ise_components=pd.DataFrame([x for r in ok for x in r["ise"]],
                                    columns=["replicate", "component", "variable", "ise"]),
        coverage=pd.DataFrame([x for r in ok for x in r["coverage"]],
                              columns=["replicate", "target", "variable", "coverage"]),
        timing=pd.DataFrame([{"replicate": r["replicate"], "seconds": r["seconds"]} for r in ok],
                            columns=["replicate", "seconds"]),
        replicates=[r["diagnostics"] for r in ok],
        failures=failures,
        scenario=scenario,
        engine=engine,
    )
    if outdir is not None:
        report.write(outdir)
        scenario.save(os.path.join(outdir, "scenario.json"))
    return report
