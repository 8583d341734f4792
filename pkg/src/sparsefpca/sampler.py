"""MCMC driver: chains, warmup adaptation and the posterior draw container.

Two modes are available:

``blocked-gibbs``
    Gibbs updates for the conjugate blocks (mean weights, scores, noise
    variances, eigenvalues, smoothing parameters) and one NUTS transition
    for X given everything else per sweep.
``full-hmc``
    NUTS over the whole unconstrained parameter vector.

Eigenvalues are stored ascending while sampling. Recorded draws are flipped
so that component 1 carries the largest eigenvalue.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd

from . import gibbs
from .data import ScalingRecord
from .errors import ConfigurationError, DataError, NumericalError
from .model import ModelConfig, ParameterState, Problem, log_density_and_grad
from .nuts import NUTSKernel, WarmupSchedule

__all__ = [
    "SamplerConfig",
    "PosteriorDraws",
    "run",
    "run_chain",
    "initial_state",
    "chain_seeds",
    "save_draws",
    "load_draws",
    "resume",
]

log = logging.getLogger(__name__)

MODES = ("blocked-gibbs", "full-hmc")
HOLD_FRACTION = 0.2
HOLD_H = 1e-3


@dataclass(frozen=True)
class SamplerConfig:
    n_chains: int = 2
    n_warmup: int = 2000
    n_samples: int = 1000
    seed: int = 0
    mode: str = "blocked-gibbs"
    target_accept: float = 0.8
    max_depth: int = 10
    lambda_update: str = "truncated"
    init: str = "data"

    def __post_init__(self):
        if self.n_chains < 1 or self.n_samples < 1 or self.n_warmup < 0:
            raise ConfigurationError("chain and draw counts must be positive")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if not (0.0 < self.target_accept < 1.0):
            raise ConfigurationError("target_accept must lie in (0, 1)")
        if self.lambda_update not in ("truncated", "reject"):
            raise ConfigurationError("lambda_update must be 'truncated' or 'reject'")
        if self.init not in ("data", "prior"):
            raise ConfigurationError("init must be 'data' or 'prior'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PosteriorDraws:
    """Constrained draws with shape ``(n_chains, n_samples, ...)``.

    Components are ordered by decreasing eigenvalue. ``Psi`` is ``(PQ, K)``
    per draw, ``scores`` is ``(N, K)``, ``H`` is ``(P, K)``.
    """

    sigma2: np.ndarray
    w_mu: np.ndarray
    h_mu: np.ndarray
    lam: np.ndarray
    H: np.ndarray
    Psi: np.ndarray
    scores: np.ndarray
    accept_stat: np.ndarray
    divergent: np.ndarray
    n_leapfrog: np.ndarray
    step_size: np.ndarray
    model_config: ModelConfig
    sampler_config: SamplerConfig
    n_rejected: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    final_states: list = field(default_factory=list)
    kernel_states: list = field(default_factory=list)
    rng_states: list = field(default_factory=list)
    scaling: object = None
    basis_spec: dict = field(default_factory=dict)
    times: np.ndarray | None = None
    subject_labels: list = field(default_factory=list)
    elapsed: float = 0.0

    PARAMS = ("sigma2", "w_mu", "h_mu", "lam", "H", "Psi", "scores")
    META = ("accept_stat", "divergent", "n_leapfrog", "step_size")

    @property
    def n_chains(self) -> int:
        return self.sigma2.shape[0]

    @property
    def n_samples(self) -> int:
        return self.sigma2.shape[1]

    @property
    def K(self) -> int:
        return self.lam.shape[-1]

    def flat(self, name: str) -> np.ndarray:
        """Draws of ``name`` with chains concatenated, shape ``(S_total, ...)``."""
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])

    def divergence_rate(self) -> float:
        return float(np.mean(self.divergent))

    def diagnostics(self) -> dict:
        rate = self.divergence_rate()
        return {
            "divergence_rate": rate,
            "n_divergent": int(np.sum(self.divergent)),
            "persistent_divergences": bool(rate > 0.10),
            "mean_accept_stat": float(np.mean(self.accept_stat)),
            "n_rejected_rank_deficient": int(np.sum(self.n_rejected)),
        }

    def subset(self, chains=None, draws=None) -> "PosteriorDraws":
        chains = slice(None) if chains is None else chains
        draws = slice(None) if draws is None else draws
        kw = {n: getattr(self, n)[chains][:, draws] for n in self.PARAMS + self.META}
        return PosteriorDraws(**kw, model_config=self.model_config, sampler_config=self.sampler_config,
                              scaling=self.scaling, basis_spec=self.basis_spec, times=self.times,
                              subject_labels=self.subject_labels)


# ---------------------------------------------------------------------------
# initialization


def chain_seeds(seed: int, n_chains: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n_chains)


def _ridge_solve(B, y, Pa, gamma):
    return np.linalg.solve(B.T @ B + gamma * Pa, B.T @ y)


def initial_state(problem: Problem, rng, method: str = "data") -> ParameterState:
    """Starting point for one chain.

    ``data`` uses ridge fits of the mean and of per-subject residual curves
    and takes the leading right singular vectors as the FPC weights, then
    perturbs X. ``prior`` draws X and scores from their standard normal
    priors with unit variance components.
    """
    P, Q, K, N = problem.P, problem.Q, problem.K, problem.N
    Pa = problem.P_alpha
    w_mu = np.zeros(P * Q)
    sigma2 = np.full(P, 0.5)
    if method == "data":
        coef = np.zeros((N, P * Q))
        for p, blk in enumerate(problem.blocks):
            if blk["n"] == 0:
                continue
            w = _ridge_solve(blk["B"], blk["y"], Pa, 1e-3 * max(blk["n"], 1))
            w_mu[p * Q:(p + 1) * Q] = w
            r = blk["y"] - blk["B"] @ w
            for i in np.unique(blk["subj"]):
                m = blk["subj"] == i
                coef[i, p * Q:(p + 1) * Q] = _ridge_solve(blk["B"][m], r[m], Pa, 1e-2)
            sigma2[p] = max(0.05, 0.5 * float(np.var(r)))
        _, sv, Vt = np.linalg.svd(coef, full_matrices=False)
        V = Vt[:K].T
        lam0 = (sv[:K] ** 2) / max(N, 1)
        lam0 = np.maximum(lam0, 1e-2)
        order = np.argsort(lam0, kind="stable")
        V, lam0 = V[:, order], lam0[order]
        X = V + 0.1 * rng.normal(size=(P * Q, K)) / np.sqrt(P * Q)
        lam = np.sort(lam0 * np.exp(0.1 * rng.normal(size=K)))
    elif method == "prior":
        X = rng.normal(size=(P * Q, K))
        lam = np.sort(np.exp(0.5 * rng.normal(size=K)))
    else:
        raise ConfigurationError(f"unknown init method {method!r}")
    lam = np.maximum.accumulate(lam) + 1e-6 * np.arange(K)
    state = ParameterState(
        sigma2=sigma2, w_mu=w_mu, h_mu=np.ones(P), lam=lam, H=np.ones((P, K)),
        X=X, scores_raw=rng.normal(size=(N, K)),
    )
    (hs, hr), (Hs, Hr) = gibbs.smoothing_conditional(state, problem)
    state.h_mu, state.H = hs / hr, Hs / Hr
    if method == "data" and problem.data.L:
        gibbs.gibbs_scores(state, problem, rng)
    return state


# ---------------------------------------------------------------------------
# chain


def _record(buf: dict, s: int, state: ParameterState, info: dict) -> None:
    rev = slice(None, None, -1)
    Psi = state.Psi
    buf["sigma2"][s] = state.sigma2
    buf["w_mu"][s] = state.w_mu
    buf["h_mu"][s] = state.h_mu
    buf["lam"][s] = state.lam[rev]
    buf["H"][s] = state.H[:, rev]
    buf["Psi"][s] = Psi[:, rev]
    buf["scores"][s] = state.scores[:, rev]
    for k in PosteriorDraws.META:
        buf[k][s] = info[k]


class _InvalidCounter:
    """Counts proposals rejected because X was rank deficient or the density was not finite."""

    def __init__(self):
        self.count = 0

    def wrap(self, f):
        def g(theta):
            lp, grad = f(theta)
            if grad is None or not np.isfinite(lp):
                self.count += 1
            return lp, grad
        return g


def _blocked_sweep(state: ParameterState, problem: Problem, kernel: NUTSKernel, rng, lambda_update: str,
                   invalid: _InvalidCounter, hold_H: bool = False):
    # (w_mu, scores) as one block: w_mu with scores integrated out, then scores
    gibbs.gibbs_wmu_collapsed(state, problem, rng)
    gibbs.gibbs_scores(state, problem, rng)
    gibbs.gibbs_polar_radius(state, problem, rng)
    xc = gibbs.XConditional(state, problem, rotated=True)
    cond = invalid.wrap(xc)
    kernel.logp_grad = cond
    kernel.inv_metric = xc.inverse_metric()
    x0 = xc.encode(state.X)
    lp, grad = cond(x0)
    x, lp, grad, info = kernel.step(x0, rng, lp, grad)
    state.set_X(xc.decode(x))
    gibbs.gibbs_rotations(state, problem, rng)
    gibbs.gibbs_sigma2(state, problem, rng)
    gibbs.gibbs_lambda(state, problem, rng, method=lambda_update)
    gibbs.gibbs_lambda_noncentered(state, problem, rng)
    H = state.H.copy()
    gibbs.gibbs_smoothing(state, problem, rng)
    if hold_H:
        state.H = H
    return x, lp, grad, info


def run_chain(problem: Problem, config: SamplerConfig, seed_seq, state: ParameterState | None = None,
              kernel_state: dict | None = None, n_warmup: int | None = None, n_samples: int | None = None):
    """Run one chain; returns ``(buffers, final_state, kernel_state, rng_state, n_rejected)``."""
    rng = np.random.Generator(np.random.PCG64(seed_seq))
    if kernel_state is not None and "rng" in kernel_state:
        rng.bit_generator.state = kernel_state["rng"]
    n_warmup = config.n_warmup if n_warmup is None else n_warmup
    n_samples = config.n_samples if n_samples is None else n_samples
    if state is None:
        state = initial_state(problem, rng, config.init)
    P, Q, K, N = problem.P, problem.Q, problem.K, problem.N

    invalid = _InvalidCounter()
    if config.mode == "full-hmc":
        lay = problem.layout
        dim = lay.size
        logp = invalid.wrap(lambda th: log_density_and_grad(th, problem))
    else:
        dim = P * Q * K
        xc0 = gibbs.XConditional(state, problem, rotated=True)
        logp = invalid.wrap(xc0)
    kernel = NUTSKernel(logp, dim, step_size=0.1, max_depth=config.max_depth)
    if config.mode != "full-hmc":
        kernel.inv_metric = xc0.inverse_metric()
    if kernel_state is not None:
        kernel.step_size = kernel_state["step_size"]
        kernel.inv_metric = np.asarray(kernel_state["inv_metric"], dtype=float)

    if config.mode == "full-hmc":
        theta = lay.unconstrain(state)
        lp, grad = logp(theta)
    else:
        theta = xc0.encode(state.X)
        lp, grad = logp(theta)
    if grad is None:
        raise NumericalError("initial state has non-finite log density")
    if kernel_state is None:
        kernel.find_reasonable_step_size(theta, rng, lp, grad)


    buf = {
        "sigma2": np.empty((n_samples, P)), "w_mu": np.empty((n_samples, P * Q)),
        "h_mu": np.empty((n_samples, P)), "lam": np.empty((n_samples, K)),
        "H": np.empty((n_samples, P, K)), "Psi": np.empty((n_samples, P * Q, K)),
        "scores": np.empty((n_samples, N, K)), "accept_stat": np.empty(n_samples),
        "divergent": np.empty(n_samples, dtype=bool), "n_leapfrog": np.empty(n_samples, dtype=np.int64),
        "step_size": np.empty(n_samples),
    }
    invalid.count = 0
    # early warmup keeps the FPC smoothing weak: the ridge start is very smooth and
    # drawing H from it right away can park a component in a smooth, near-zero mode
    n_hold = int(HOLD_FRACTION * n_warmup) if kernel_state is None and config.mode != "full-hmc" else 0
    warm = WarmupSchedule(kernel, n_warmup, config.target_accept, adapt_metric=config.mode == "full-hmc",
                          restarts=(n_hold,) if n_hold else ()) if n_warmup else None
    for it in range(n_warmup + n_samples):
        if config.mode == "full-hmc":
            theta, lp, grad, info = kernel.step(theta, rng, lp, grad)
            state = lay.constrain(theta)
        else:
            hold = it < n_hold
            if hold:
                state.H = np.full_like(state.H, HOLD_H)
            theta, lp, grad, info = _blocked_sweep(state, problem, kernel, rng, config.lambda_update, invalid,
                                                   hold_H=hold)
        if it < n_warmup:
            warm.update(theta, info["accept_stat"], rng, lp, grad)
        else:
            _record(buf, it - n_warmup, state, info)
    kstate = {"step_size": float(kernel.step_size), "inv_metric": kernel.inv_metric.tolist()}
    return buf, state, kstate, rng.bit_generator.state, invalid.count


def _chain_job(args):
    problem, config, ss = args
    return run_chain(problem, config, ss)


def run(config: SamplerConfig, data, basis, model_config: ModelConfig, scaling=None,
        workers: int = 1) -> PosteriorDraws:
    """Sample the posterior with ``config.n_chains`` independent chains.

    Chains use independent streams spawned from ``config.seed``; results are
    identical across repeated calls with the same inputs and do not depend on
    ``workers`` (the number of processes running chains at once).
    """
    if data.L == 0 and config.init == "data":
        log.info("no observations; starting from a prior draw")
        config = dataclasses.replace(config, init="prior")
    problem = Problem(data, basis, model_config)
    t0 = time.perf_counter()
    seeds = chain_seeds(config.seed, config.n_chains)
    out = {k: [] for k in PosteriorDraws.PARAMS + PosteriorDraws.META}
    finals, kstates, rstates, rejected = [], [], [], []
    jobs = [(problem, config, ss) for ss in seeds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as ex:
            results = list(ex.map(_chain_job, jobs))
    else:
        results = [_chain_job(j) for j in jobs]
    for c, (buf, state, kst, rst, nrej) in enumerate(results):
        for k in out:
            out[k].append(buf[k])
        finals.append(state)
        kstates.append(kst)
        rstates.append(rst)
        rejected.append(nrej)
        log.info("chain %d done: step size %.3g, divergences %d", c, kst["step_size"], int(buf["divergent"].sum()))
    draws = PosteriorDraws(
        **{k: np.stack(v) for k, v in out.items()},
        model_config=model_config, sampler_config=config, n_rejected=np.array(rejected),
        final_states=finals, kernel_states=kstates, rng_states=rstates, scaling=scaling,
        basis_spec={"Q": basis.Q, "degree": basis.degree, "quad_points": len(basis.quadrature.nodes) // (len(basis.knots.breakpoints) - 1)},
        times=np.asarray(data.times).copy(), subject_labels=list(data.subject_labels),
    )
    draws.elapsed = time.perf_counter() - t0
    diag = draws.diagnostics()
    if diag["persistent_divergences"]:
        log.warning("divergence rate %.1f%% exceeds 10%%", 100 * diag["divergence_rate"])
    return draws


# ---------------------------------------------------------------------------
# persistence


def _column_names(name: str, shape: tuple) -> list[str]:
    if not shape:
        return [name]
    return [f"{name}[{';'.join(str(i + 1) for i in idx)}]" for idx in np.ndindex(*shape)]


def _state_to_dict(state: ParameterState) -> dict:
    return {k: np.asarray(getattr(state, k)).tolist() for k in ("sigma2", "w_mu", "h_mu", "lam", "H", "X", "scores_raw")}


def _state_from_dict(d: dict) -> ParameterState:
    return ParameterState(**{k: np.asarray(v, dtype=float) for k, v in d.items()})


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_draws(draws: PosteriorDraws, outdir) -> dict:
    """Write one CSV per parameter group plus ``manifest.json``; returns the manifest.

    Each CSV has ``chain`` and ``draw`` columns followed by the flattened
    parameter entries, e.g. ``Psi[3;2]`` (1-based, row-major). Values use ``%.17g`` so they
    round-trip exactly.
    """
    os.makedirs(outdir, exist_ok=True)
    files = {}
    C, S = draws.n_chains, draws.n_samples
    chain_col = np.repeat(np.arange(1, C + 1), S)
    draw_col = np.tile(np.arange(1, S + 1), C)
    for name in draws.PARAMS + draws.META:
        arr = getattr(draws, name)
        flat = arr.reshape(C * S, -1).astype(float)
        cols = ["chain", "draw"] + _column_names(name, arr.shape[2:])
        path = os.path.join(outdir, f"{name}.csv")
        with open(path, "w", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            body = np.column_stack([chain_col, draw_col, flat])
            fmt = ["%d", "%d"] + ["%.17g"] * flat.shape[1]
            np.savetxt(fh, body, fmt=fmt, delimiter=",")
        files[name] = {"file": f"{name}.csv", "shape": list(arr.shape[2:]), "sha256": _sha256(path)}
    manifest = {
        "format": "sparsefpca-draws/1",
        "dims": {"n_chains": C, "n_samples": S, "P": draws.model_config.P, "Q": draws.model_config.Q,
                 "K": draws.model_config.K, "N": int(draws.scores.shape[2])},
        "seed": draws.sampler_config.seed,
        "sampler_config": draws.sampler_config.to_dict(),
        "model_config": draws.model_config.to_dict(),
        "scaling": None if draws.scaling is None else draws.scaling.to_dict(),
        "basis": draws.basis_spec,
        "times": None if draws.times is None else np.asarray(draws.times).tolist(),
        "subject_labels": [str(s) for s in draws.subject_labels],
        "n_rejected": np.asarray(draws.n_rejected).tolist(),
        "diagnostics": draws.diagnostics(),
        "files": files,
        "resume": {
            "final_states": [_state_to_dict(s) for s in draws.final_states],
            "kernel_states": draws.kernel_states,
            "rng_states": draws.rng_states,
        },
    }
    with open(os.path.join(outdir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_draws(outdir, verify: bool = True) -> PosteriorDraws:
    """Read draws written by :func:`save_draws`."""
    mpath = os.path.join(outdir, "manifest.json")
    if not os.path.exists(mpath):
        raise DataError(f"no manifest.json in {outdir}")
    with open(mpath) as fh:
        man = json.load(fh)
    C, S = man["dims"]["n_chains"], man["dims"]["n_samples"]
    arrays = {}
    for name, meta in man["files"].items():
        path = os.path.join(outdir, meta["file"])
        if verify and _sha256(path) != meta["sha256"]:
            raise DataError(f"digest mismatch for {meta['file']}")
        df = pd.read_csv(path, float_precision="round_trip")
        vals = df.iloc[:, 2:].to_numpy(dtype=float).reshape([C, S] + meta["shape"])
        if name == "divergent":
            vals = vals.astype(bool)
        elif name == "n_leapfrog":
            vals = vals.astype(np.int64)
        arrays[name] = vals
    res = man.get("resume", {})
    return PosteriorDraws(
        **arrays,
        model_config=ModelConfig(**man["model_config"]),
        sampler_config=SamplerConfig(**man["sampler_config"]),
        n_rejected=np.asarray(man.get("n_rejected", []), dtype=int),
        final_states=[_state_from_dict(d) for d in res.get("final_states", [])],
        kernel_states=res.get("kernel_states", []),
        rng_states=res.get("rng_states", []),
        scaling=None if man["scaling"] is None else ScalingRecord.from_dict(man["scaling"]),
        basis_spec=man["basis"],
        times=None if man["times"] is None else np.asarray(man["times"], dtype=float),
        subject_labels=man["subject_labels"],
    )


def resume(draws: PosteriorDraws, data, basis, n_samples: int) -> PosteriorDraws:
    """Continue every chain for ``n_samples`` more draws without further adaptation.

    The returned object holds the old and new draws concatenated. Continuing
    a run in pieces gives the same draws as one uninterrupted sampling phase
    of the same total length.
    """
    if len(draws.final_states) != draws.n_chains:
        raise DataError("draws carry no resumable chain state")
    problem = Problem(data, basis, draws.model_config)
    cfg = draws.sampler_config
    seeds = chain_seeds(cfg.seed, draws.n_chains)
    new = {k: [] for k in PosteriorDraws.PARAMS + PosteriorDraws.META}
    finals, kstates, rstates, rejected = [], [], [], []
    for c, ss in enumerate(seeds):
        kst = dict(draws.kernel_states[c])
        kst["rng"] = draws.rng_states[c]
        buf, state, kst2, rst, nrej = run_chain(problem, cfg, ss, state=draws.final_states[c].copy(),
                                                kernel_state=kst, n_warmup=0, n_samples=n_samples)
        for k in new:
            new[k].append(buf[k])
        finals.append(state)
        kstates.append(kst2)
        rstates.append(rst)
        rejected.append(nrej)
    merged = {k: np.concatenate([getattr(draws, k), np.stack(v)], axis=1) for k, v in new.items()}
    n_rej = np.asarray(draws.n_rejected) + np.asarray(rejected) if len(draws.n_rejected) else np.asarray(rejected)
    cfg2 = dataclasses.replace(cfg, n_samples=cfg.n_samples + n_samples)
    return PosteriorDraws(**merged, model_config=draws.model_config, sampler_config=cfg2, n_rejected=n_rej,
                          final_states=finals, kernel_states=kstates, rng_states=rstates, scaling=draws.scaling,
                          basis_spec=draws.basis_spec, times=draws.times, subject_labels=draws.subject_labels)
