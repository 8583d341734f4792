"""Procrustes alignment of FPC draws, convergence diagnostics and summaries.

FPCs are only identified up to rotation, so each draw is rotated toward a
common reference before averaging. Rotations act on the FPC weights as
``Psi R`` and on the scores as ``R^T xi``; fitted trajectories do not change.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .errors import DataError, NumericalError
from .sampler import PosteriorDraws

__all__ = [
    "Reference",
    "AlignedDraws",
    "procrustes_rotation",
    "procrustes_align",
    "default_reference",
    "reference_from_truth",
    "posterior_fpc_estimate",
    "rhat",
    "ess",
    "convergence_summary",
    "variance_explained",
    "original_scale_fpcs",
    "evaluation_matrix",
    "write_alignment_report",
    "write_variance_table",
    "write_fpc_estimate",
]

log = logging.getLogger(__name__)

RHAT_THRESHOLD = 1.05


class AlignmentWarning(UserWarning):
    pass


@dataclass
class Reference:
    """Reference FPC matrix evaluated on ``grid``; rows stack variables, shape ``(P * len(grid), K)``."""

    values: np.ndarray
    grid: np.ndarray
    source: str = "user"


@dataclass
class AlignedDraws:
    """Rotated draws with shapes matching :class:`PosteriorDraws`.

    ``rotations[c, s]`` is the ``K x K`` matrix applied to draw ``s`` of
    chain ``c``.
    """

    draws: PosteriorDraws
    rotations: np.ndarray
    Psi: np.ndarray
    scores: np.ndarray
    reference: Reference
    rank_warning: bool = False

    @property
    def n_chains(self) -> int:
        return self.Psi.shape[0]

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name) if name in ("Psi", "scores", "rotations") else getattr(self.draws, name)
        return a.reshape((-1,) + a.shape[2:])


def evaluation_matrix(basis, grid, P: int):
    """Block-diagonal ``I_P kron B(grid)`` as a dense ``(P M, P Q)`` array."""
    B = basis.evaluate(grid)
    return np.kron(np.eye(P), B)


def _sign_fix(U: np.ndarray, V: np.ndarray):
    """Flip singular pairs so the largest-magnitude entry of each left vector is positive."""
    idx = np.argmax(np.abs(U), axis=0)
    sgn = np.sign(U[idx, np.arange(U.shape[1])])
    sgn[sgn == 0] = 1.0
    return U * sgn, V * sgn


def procrustes_rotation(Phi: np.ndarray, reference: np.ndarray) -> tuple[np.ndarray, float]:
    """Orthogonal ``R`` minimizing ``||reference - Phi R||_F``.

    Returns ``(R, smallest singular value of Phi^T reference)``.
    """
    M = Phi.T @ reference
    U, d, Vt = np.linalg.svd(M)
    U, V = _sign_fix(U, Vt.T)
    return U @ V.T, float(d[-1])


def procrustes_align(draws: PosteriorDraws, reference: Reference, basis) -> AlignedDraws:
    """Rotate every draw toward ``reference``.

    The rotation for a draw solves the orthogonal Procrustes problem between
    its evaluated FPCs ``(I_P kron B(grid)) Psi`` and the reference.
    """
    P, K = draws.model_config.P, draws.K
    ref = np.asarray(reference.values, dtype=float)
    grid = np.asarray(reference.grid, dtype=float)
    if ref.shape != (P * grid.size, K):
        raise DataError(f"reference must have shape {(P * grid.size, K)}, got {ref.shape}")
    if not np.all(np.isfinite(ref)):
        raise DataError("reference contains non-finite values")
    rank_warn = np.linalg.matrix_rank(ref) < K
    if rank_warn:
        warnings.warn("reference has rank below K; rotation is not unique", AlignmentWarning, stacklevel=2)
    # Phi^T ref = Psi^T W with W = E^T ref
    W = evaluation_matrix(basis, grid, P).T @ ref
    C, S = draws.n_chains, draws.n_samples
    R = np.empty((C, S, K, K))
    for c in range(C):
        for s in range(S):
            M = draws.Psi[c, s].T @ W
            U, _, Vt = np.linalg.svd(M)
            U, V = _sign_fix(U, Vt.T)
            R[c, s] = U @ V.T
    Psi = np.einsum("csqk,cskj->csqj", draws.Psi, R)
    scores = np.einsum("csnk,cskj->csnj", draws.scores, R)
    return AlignedDraws(draws, R, Psi, scores, reference, bool(rank_warn))


def default_reference(draws: PosteriorDraws, basis, grid=None) -> Reference:
    """Reference from the posterior mean of the subjects' fitted FPC curves.

    The posterior mean of ``Psi xi_i`` (coefficient space, subjects x PQ) is
    decomposed by a thin SVD. Because the basis is orthonormal, the leading
    right singular vectors evaluated on ``grid`` are orthonormal FPCs in the
    sum inner product.
    """
    S_total = draws.n_chains * draws.n_samples
    if S_total < 2:
        raise DataError("a reference needs at least 2 draws")
    grid = draws.times if grid is None else np.asarray(grid, dtype=float)
    P, K = draws.model_config.P, draws.K
    fits = np.einsum("csnk,csqk->nq", draws.scores, draws.Psi) / S_total
    _, d, Vt = np.linalg.svd(fits, full_matrices=False)
    V = Vt[:K].T
    if d.size < K or d[K - 1] <= 1e-12 * d[0]:
        warnings.warn("posterior mean fits have rank below K", AlignmentWarning, stacklevel=2)
    idx = np.argmax(np.abs(V), axis=0)
    V = V * np.sign(V[idx, np.arange(K)])
    return Reference(evaluation_matrix(basis, grid, P) @ V, grid, source="posterior-mean-svd")


def reference_from_truth(phi: np.ndarray, grid) -> Reference:
    """Reference from true FPCs given as ``(K, P, M)`` on ``grid``."""
    K, P, M = phi.shape
    return Reference(np.transpose(phi, (1, 2, 0)).reshape(P * M, K), np.asarray(grid, dtype=float), source="truth")


def posterior_fpc_estimate(aligned: AlignedDraws, basis, grid=None):
    """Orthonormalized mean of the aligned FPC weights.

    Returns ``(Psi_hat, Phi_hat)`` where ``Phi_hat`` is evaluated on ``grid``
    (default: the fit's pooled times) with variables stacked.
    """
    mean = aligned.flat("Psi").mean(axis=0)
    U, d, Vt = np.linalg.svd(mean, full_matrices=False)
    if d[-1] <= 1e-10 * max(d[0], 1e-300):
        raise NumericalError("mean aligned FPC matrix is rank deficient; the posterior is severely multimodal")
    Psi_hat = U @ Vt
    grid = aligned.draws.times if grid is None else np.asarray(grid, dtype=float)
    P = aligned.draws.model_config.P
    return Psi_hat, evaluation_matrix(basis, grid, P) @ Psi_hat


# ---------------------------------------------------------------------------
# convergence


def rhat(x) -> float:
    """Split-chain potential scale reduction factor.

    ``x`` has shape ``(n_chains, n_draws)``. Each chain is split in half.
    Returns ``nan`` when the within-chain variance is zero.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 4:
        raise DataError("rhat needs an array (chains, draws) with at least 2 chains of 4 draws")
    n = x.shape[1] // 2
    halves = np.concatenate([x[:, :n], x[:, x.shape[1] - n:]], axis=0)
    W = np.mean(np.var(halves, axis=1, ddof=1))
    if not W > 0:
        return float("nan")
    B = n * np.var(halves.mean(axis=1), ddof=1)
    var_plus = (n - 1) / n * W + B / n
    return float(np.sqrt(var_plus / W))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = x.size
    f = np.fft.rfft(x - x.mean(), n=2 * n)
    return np.fft.irfft(f * np.conj(f))[:n] / n


def ess(x) -> float:
    """Multi-chain effective sample size with Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None]
    m, n = x.shape
    if n < 4:
        return float(m * n)
    acov = np.array([_autocov(c) for c in x])
    chain_var = acov[:, 0] * n / (n - 1)
    W = chain_var.mean()
    if not W > 0:
        return float("nan")
    var_plus = W * (n - 1) / n
    if m > 1:
        var_plus += np.var(x.mean(axis=1), ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    # pair sums, stop at the first negative pair, then enforce monotonicity
    t = 0
    pairs = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pairs.append(s)
        t += 2
    pairs = np.minimum.accumulate(np.array(pairs)) if pairs else np.array([1.0])
    tau = -1.0 + 2.0 * pairs.sum()
    tau = max(tau, 1.0 / np.log10(m * n + 10))
    return float(m * n / tau)


def _scalar_blocks(aligned: AlignedDraws) -> dict:
    d = aligned.draws
    return {
        "sigma2": d.sigma2, "lambda": d.lam, "h_mu": d.h_mu, "H": d.H, "w_mu": d.w_mu,
        "Psi": aligned.Psi, "scores": aligned.scores,
    }


def convergence_summary(aligned: AlignedDraws, threshold: float = RHAT_THRESHOLD) -> dict:
    """Split R-hat for every scalar parameter after alignment.

    Returns the maximum per parameter group, the overall maximum, the count
    of undefined values and whether any exceeds ``threshold``.
    """
    groups = {}
    overall = -np.inf
    n_undef = 0
    n_total = 0
    for name, arr in _scalar_blocks(aligned).items():
        C, S = arr.shape[:2]
        flat = arr.reshape(C, S, -1)
        vals = np.array([rhat(flat[:, :, j]) for j in range(flat.shape[2])])
        undef = np.isnan(vals)
        n_undef += int(undef.sum())
        n_total += vals.size
        gmax = float(np.max(vals[~undef])) if np.any(~undef) else float("nan")
        groups[name] = {"max_rhat": gmax, "n": int(vals.size), "n_undefined": int(undef.sum())}
        if np.isfinite(gmax):
            overall = max(overall, gmax)
    overall = float(overall) if np.isfinite(overall) else float("nan")
    return {
        "max_rhat": overall,
        "threshold": threshold,
        "flagged": bool(np.isfinite(overall) and overall > threshold),
        "n_scalars": n_total,
        "n_undefined": n_undef,
        "groups": groups,
    }


# ---------------------------------------------------------------------------
# variance explained


def _interval(x: np.ndarray, axis=0, level: float = 0.95):
    a = (1.0 - level) / 2.0
    return np.quantile(x, a, axis=axis), np.quantile(x, 1.0 - a, axis=axis)


def variance_explained(draws, truncations=None, level: float = 0.95) -> pd.DataFrame:
    """Proportion of variance explained per truncation level.

    For a draw with eigenvalues ``lam`` (descending), FPC weights ``Psi`` and
    noise variances ``sigma2`` on the standardized scale:

    * ``global(k) = sum_{j<=k} lam_j / (sum_j lam_j + sum_p sigma2_p)``
    * ``share_p(k) = sum_{j<=k} lam_j ||psi_j^(p)||^2 / (same denominator)``,
      so the shares add up to the global value
    * ``within_p(k) = sum_{j<=k} lam_j ||psi_j^(p)||^2 / (sum_j lam_j ||psi_j^(p)||^2 + sigma2_p)``

    ``draws`` may be :class:`PosteriorDraws` or :class:`AlignedDraws`; the
    unrotated eigen-ordered components are used in both cases.
    """
    if isinstance(draws, AlignedDraws):
        draws = draws.draws
    P, Q, K = draws.model_config.P, draws.model_config.Q, draws.K
    lam = draws.flat("lam")
    s2 = draws.flat("sigma2")
    Psi = draws.flat("Psi")
    truncations = list(range(1, K + 1)) if truncations is None else list(truncations)
    if any(k < 1 or k > K for k in truncations):
        raise DataError(f"truncations must lie in 1..{K}")
    block_norm = np.stack([np.sum(Psi[:, p * Q:(p + 1) * Q] ** 2, axis=1) for p in range(P)], axis=1)  # (S, P, K)
    mass = lam[:, None, :] * block_norm
    denom = lam.sum(axis=1) + s2.sum(axis=1)
    within_denom = mass.sum(axis=2) + s2
    rows = []
    for k in truncations:
        g = lam[:, :k].sum(axis=1) / denom
        lo, hi = _interval(g, level=level)
        row = {"k": k, "global_mean": g.mean(), "global_lo": lo, "global_hi": hi}
        for p in range(P):
            share = mass[:, p, :k].sum(axis=1) / denom
            within = mass[:, p, :k].sum(axis=1) / within_denom[:, p]
            slo, shi = _interval(share, level=level)
            wlo, whi = _interval(within, level=level)
            row.update({f"share_p{p + 1}_mean": share.mean(), f"share_p{p + 1}_lo": slo, f"share_p{p + 1}_hi": shi,
                        f"within_p{p + 1}_mean": within.mean(), f"within_p{p + 1}_lo": wlo, f"within_p{p + 1}_hi": whi})
        rows.append(row)
    return pd.DataFrame(rows)


def original_scale_fpcs(draws: PosteriorDraws):
    """Eigen-decompose each draw's covariance after undoing the per-variable scaling.

    With ``S = diag(sd_p) kron I_Q`` the original-scale coefficient covariance is
    ``S Psi Lambda Psi^T S``. Its decomposition ``U D^2 U^T`` (from the SVD of
    ``S Psi Lambda^{1/2}``) gives orthonormal original-scale FPC weights ``U``,
    eigenvalues ``D^2`` and scores ``D V^T Lambda^{-1/2} xi`` that reproduce the
    same fitted curves. Returns ``(Psi, lam, scores)`` with chains flattened.
    """
    if draws.scaling is None:
        raise DataError("draws carry no scaling record")
    Q = draws.model_config.Q
    sd_vec = np.repeat(np.asarray(draws.scaling.sd, dtype=float), Q)
    Psi = draws.flat("Psi")
    lam = draws.flat("lam")
    xi = draws.flat("scores")
    S = Psi.shape[0]
    out_psi = np.empty_like(Psi)
    out_lam = np.empty_like(lam)
    out_xi = np.empty_like(xi)
    for s in range(S):
        rl = np.sqrt(lam[s])
        A = sd_vec[:, None] * Psi[s] * rl
        U, d, Vt = np.linalg.svd(A, full_matrices=False)
        out_psi[s] = U
        out_lam[s] = d**2
        out_xi[s] = (xi[s] / rl) @ (Vt.T * d)
    return out_psi, out_lam, out_xi


# ---------------------------------------------------------------------------
# writers


def write_alignment_report(path, aligned: AlignedDraws, summary: dict | None = None) -> dict:
    summary = convergence_summary(aligned) if summary is None else summary
    report = {
        "reference_source": aligned.reference.source,
        "rank_warning": aligned.rank_warning,
        "convergence": summary,
        "sampler": aligned.draws.diagnostics(),
    }
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True, allow_nan=True)
    return report


def write_variance_table(path, table: pd.DataFrame) -> None:
    table.to_csv(path, index=False, float_format="%.10g")


def write_fpc_estimate(path, aligned: AlignedDraws, basis, grid=None, level: float = 0.95) -> pd.DataFrame:
    """Long table of the FPC point estimate with pointwise intervals of the aligned draws.

    Values are on the standardized scale; ``time`` is in original units when
    the draws carry a scaling record.
    """
    grid = aligned.draws.times if grid is None else np.asarray(grid, dtype=float)
    _, Phi_hat = posterior_fpc_estimate(aligned, basis, grid)
    P, K = aligned.draws.model_config.P, aligned.draws.K
    E = evaluation_matrix(basis, grid, P)
    Phi_draws = np.einsum("mq,sqk->smk", E, aligned.flat("Psi"))
    lo, hi = _interval(Phi_draws, axis=0, level=level)
    sc = aligned.draws.scaling
    t_out = grid if sc is None else sc.from_unit_time(grid)
    labels = list(range(1, P + 1)) if sc is None else list(sc.variables)
    M = grid.size
    rows = []
    for p in range(P):
        for k in range(K):
            sl = slice(p * M, (p + 1) * M)
            rows.append(pd.DataFrame({
                "time": t_out, "variable": labels[p], "k": k + 1,
                "estimate": Phi_hat[sl, k], "mean": Phi_draws[:, sl, k].mean(axis=0),
                "lo95": lo[sl, k], "hi95": hi[sl, k],
            }))
    df = pd.concat(rows, ignore_index=True)
    df.to_csv(path, index=False, float_format="%.10g")
    return df
