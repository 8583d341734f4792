"""Parameter spaces, the polar map onto the Stiefel manifold, and the log posterior.

Constrained parameters
    sigma2 (P,), w_mu (P*Q,), h_mu (P,), lam (K,) ascending, H (P, K),
    X (P*Q, K), scores_raw (N, K).
Derived
    Psi = polar(X), scores = scores_raw * sqrt(lam).

The unconstrained vector stacks, in order: log sigma2, w_mu, log h_mu, the
ordered-positive transform of lam (log lam_1, log(lam_2 - lam_1), ...), log H
(row-major), X (row-major) and scores_raw (row-major).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import ConfigurationError, NumericalError

__all__ = [
    "ModelConfig",
    "ParameterState",
    "Layout",
    "Problem",
    "polar_orthonormalize",
    "polar_pullback",
    "log_posterior",
    "log_density",
    "log_density_and_grad",
    "grad_log_posterior",
    "likelihood_block",
]

LOG_2PI = float(np.log(2.0 * np.pi))
RANK_TOL = 1e-12


@dataclass(frozen=True)
class ModelConfig:
    """Model dimensions and prior hyperparameters (gamma laws use shape/rate)."""

    K: int
    Q: int
    P: int
    alpha: float = 0.1
    a_sigma: float = 0.01
    b_sigma: float = 0.01
    a_lambda: float = 0.01
    b_lambda: float = 0.01
    a_mu: float = 0.01
    b_mu: float = 0.01
    a_psi: float = 0.01
    b_psi: float = 0.01

    def __post_init__(self):
        if self.K < 1 or self.Q < 1 or self.P < 1:
            raise ConfigurationError("K, Q and P must be positive")
        if self.K > self.P * self.Q:
            raise ConfigurationError(f"K={self.K} exceeds P*Q={self.P * self.Q}")
        if not (0.0 < self.alpha <= 1.0):
            raise ConfigurationError("alpha must lie in (0, 1]")
        for name in ("a_sigma", "b_sigma", "a_lambda", "b_lambda", "a_mu", "b_mu", "a_psi", "b_psi"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"hyperparameter {name} must be positive")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# polar map


def polar_orthonormalize(X: np.ndarray, return_factors: bool = False):
    """Orthonormal polar factor ``X (X^T X)^{-1/2}``.

    With ``return_factors`` also returns ``(s, Z)``: the singular values of
    ``X`` and the eigenvectors of ``X^T X``, which the gradient pullback needs.
    """
    X = np.asarray(X, dtype=float)
    d, Z = np.linalg.eigh(X.T @ X)
    if not np.all(np.isfinite(d)) or d[0] <= RANK_TOL * max(d[-1], np.finfo(float).tiny):
        raise NumericalError("X is rank deficient; polar factor is not unique")
    s = np.sqrt(d)
    Psi = X @ ((Z / s) @ Z.T)
    if return_factors:
        return Psi, s, Z
    return Psi


def polar_pullback(G: np.ndarray, Psi: np.ndarray, s: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """Gradient with respect to X given ``G = d f / d Psi`` at ``Psi = polar(X)``.

    Uses ``dPsi = (I - Psi Psi^T) dX P^{-1} + Psi A`` with ``P = (X^T X)^{1/2}``
    and skew ``A`` solving ``A P + P A = Psi^T dX - dX^T Psi``. In the
    eigenbasis of ``P`` the Sylvester solve divides by ``s_i + s_j`` which is
    bounded away from zero for full-rank X.
    """
    Pinv = (Z / s) @ Z.T
    PtG = Psi.T @ G
    first = (G - Psi @ PtG) @ Pinv
    C = Z.T @ PtG @ Z
    E = Z @ (C / (s[:, None] + s[None, :])) @ Z.T
    return first + Psi @ (E - E.T)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParameterState:
    sigma2: np.ndarray
    w_mu: np.ndarray
    h_mu: np.ndarray
    lam: np.ndarray
    H: np.ndarray
    X: np.ndarray
    scores_raw: np.ndarray
    _psi: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def Psi(self) -> np.ndarray:
        if self._psi is None:
            self._psi = polar_orthonormalize(self.X)
        return self._psi

    @property
    def scores(self) -> np.ndarray:
        return self.scores_raw * np.sqrt(self.lam)

    def with_scores(self, scores: np.ndarray) -> "ParameterState":
        return replace(self, scores_raw=scores / np.sqrt(self.lam), _psi=self._psi)

    def copy(self) -> "ParameterState":
        return ParameterState(
            self.sigma2.copy(), self.w_mu.copy(), self.h_mu.copy(), self.lam.copy(),
            self.H.copy(), self.X.copy(), self.scores_raw.copy(),
            None if self._psi is None else self._psi.copy(),
        )

    def set_X(self, X: np.ndarray, Psi: np.ndarray | None = None) -> None:
        self.X = X
        self._psi = Psi


class Layout:
    """Offsets of each parameter group in the unconstrained vector."""

    def __init__(self, P: int, Q: int, K: int, N: int):
        self.P, self.Q, self.K, self.N = P, Q, K, N
        sizes = [("log_sigma2", P), ("w_mu", P * Q), ("log_h_mu", P), ("lam_u", K),
                 ("log_H", P * K), ("X", P * Q * K), ("scores_raw", N * K)]
        self.slices = {}
        pos = 0
        for name, n in sizes:
            self.slices[name] = slice(pos, pos + n)
            pos += n
        self.size = pos

    def __getitem__(self, name: str) -> slice:
        return self.slices[name]

    def unconstrain(self, state: ParameterState) -> np.ndarray:
        lam = np.asarray(state.lam, dtype=float)
        if np.any(np.diff(lam) <= 0):
            raise ConfigurationError("lambda must be strictly ascending in storage")
        theta = np.empty(self.size)
        theta[self["log_sigma2"]] = np.log(state.sigma2)
        theta[self["w_mu"]] = state.w_mu
        theta[self["log_h_mu"]] = np.log(state.h_mu)
        theta[self["lam_u"]] = np.log(np.diff(np.concatenate([[0.0], lam])))
        theta[self["log_H"]] = np.log(state.H).ravel()
        theta[self["X"]] = state.X.ravel()
        theta[self["scores_raw"]] = state.scores_raw.ravel()
        return theta

    def constrain(self, theta: np.ndarray) -> ParameterState:
        P, Q, K, N = self.P, self.Q, self.K, self.N
        return ParameterState(
            sigma2=np.exp(theta[self["log_sigma2"]]),
            w_mu=theta[self["w_mu"]].copy(),
            h_mu=np.exp(theta[self["log_h_mu"]]),
            lam=np.cumsum(np.exp(theta[self["lam_u"]])),
            H=np.exp(theta[self["log_H"]]).reshape(P, K),
            X=theta[self["X"]].reshape(P * Q, K).copy(),
            scores_raw=theta[self["scores_raw"]].reshape(N, K).copy(),
        )


# ---------------------------------------------------------------------------
# problem: data + basis + config with cached design quantities


class Problem:
    """Data, basis and configuration with per-variable design matrices cached."""

    def __init__(self, data, basis, config: ModelConfig):
        if config.Q != basis.Q:
            raise ConfigurationError(f"config Q={config.Q} but basis has Q={basis.Q}")
        if config.P != data.n_vars:
            raise ConfigurationError(f"config P={config.P} but data has {data.n_vars} variables")
        self.data = data
        self.basis = basis
        self.config = config
        self.P, self.Q, self.K, self.N = config.P, config.Q, config.K, data.n_subjects
        self.layout = Layout(self.P, self.Q, self.K, self.N)
        self.P_alpha = basis.penalty_alpha(config.alpha)
        # eigenbasis of the penalty; X is sampled in these coordinates
        self.penalty_eig, self.penalty_vecs = np.linalg.eigh(self.P_alpha)
        self.B_T = basis.evaluate(data.times) if data.M else np.zeros((0, self.Q))
        self.blocks = []
        for p in range(self.P):
            sl = data.block(p)
            tidx, subj, y = data.time_idx[sl], data.subj[sl], data.y[sl]
            n = y.shape[0]
            cols = np.arange(n)
            self.blocks.append({
                "y": y,
                "subj": subj,
                "tidx": tidx,
                "B": self.B_T[tidx],
                "n": n,
                # aggregation operators: observation -> subject, observation -> grid time
                "to_subj": sp.csr_matrix((np.ones(n), (subj, cols)), shape=(self.N, n)),
                "to_time": sp.csr_matrix((np.ones(n), (tidx, cols)), shape=(data.M, n)),
            })

    def w_block(self, w_mu: np.ndarray, p: int) -> np.ndarray:
        return w_mu[p * self.Q:(p + 1) * self.Q]

    def psi_block(self, Psi: np.ndarray, p: int) -> np.ndarray:
        return Psi[p * self.Q:(p + 1) * self.Q]


# ---------------------------------------------------------------------------
# densities


def _inv_gamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) - (a + 1.0) * np.log(x) - b / x


def _gamma_logpdf(x, a, b):
    return a * np.log(b) - gammaln(a) + (a - 1.0) * np.log(x) - b * x


def _block_residual(problem: Problem, p: int, state: ParameterState, Psi, scores):
    blk = problem.blocks[p]
    Phi_T = problem.B_T @ problem.psi_block(Psi, p)
    mu_T = problem.B_T @ problem.w_block(state.w_mu, p)
    Phi_obs = Phi_T[blk["tidx"]]
    fit = mu_T[blk["tidx"]] + np.einsum("lk,lk->l", Phi_obs, scores[blk["subj"]])
    return blk["y"] - fit, Phi_obs


def likelihood_block(p: int, state: ParameterState, problem: Problem) -> float:
    """Gaussian log-likelihood of variable ``p``'s observations."""
    blk = problem.blocks[p]
    if blk["n"] == 0:
        return 0.0
    r, _ = _block_residual(problem, p, state, state.Psi, state.scores)
    s2 = state.sigma2[p]
    return float(-0.5 * blk["n"] * (LOG_2PI + np.log(s2)) - 0.5 * np.dot(r, r) / s2)


def log_likelihood(state: ParameterState, problem: Problem) -> float:
    total = 0.0
    for p in range(problem.P):
        total += likelihood_block(p, state, problem)
    return total


def log_prior(state: ParameterState, problem: Problem) -> float:
    """Priors and smoothing penalties in constrained coordinates (no Jacobian)."""
    c = problem.config
    Q, Pa = problem.Q, problem.P_alpha
    Psi = state.Psi
    lp = np.sum(_inv_gamma_logpdf(state.sigma2, c.a_sigma, c.b_sigma))
    lp += np.sum(_inv_gamma_logpdf(state.lam, c.a_lambda, c.b_lambda))
    lp += np.sum(_gamma_logpdf(state.h_mu, c.a_mu, c.b_mu))
    lp += np.sum(_gamma_logpdf(state.H, c.a_psi, c.b_psi))
    for p in range(problem.P):
        w = problem.w_block(state.w_mu, p)
        lp += 0.5 * Q * np.log(state.h_mu[p]) - 0.5 * state.h_mu[p] * (w @ Pa @ w)
        Pp = problem.psi_block(Psi, p)
        quad = np.einsum("qk,qr,rk->k", Pp, Pa, Pp)
        lp += np.sum(0.5 * Q * np.log(state.H[p]) - 0.5 * state.H[p] * quad)
    lp += -0.5 * np.sum(state.X**2) - 0.5 * LOG_2PI * state.X.size
    lp += -0.5 * np.sum(state.scores_raw**2) - 0.5 * LOG_2PI * state.scores_raw.size
    return float(lp)


def log_posterior(state: ParameterState, problem: Problem) -> float:
    """Joint log posterior (up to a constant) in constrained coordinates.

    Invalid states (non-positive variances, unordered eigenvalues, rank
    deficient X, non-finite values) return ``-inf``.
    """
    try:
        if (np.any(state.sigma2 <= 0) or np.any(state.lam <= 0) or np.any(state.h_mu <= 0)
                or np.any(state.H <= 0) or np.any(np.diff(state.lam) <= 0)):
            return -np.inf
        with np.errstate(all="ignore"):
            val = log_likelihood(state, problem) + log_prior(state, problem)
    except NumericalError:
        return -np.inf
    return val if np.isfinite(val) else -np.inf


def log_density(theta: np.ndarray, problem: Problem) -> float:
    """Log posterior in unconstrained coordinates, including the log-Jacobian."""
    return log_density_and_grad(theta, problem, need_grad=False)[0]


def log_density_and_grad(theta: np.ndarray, problem: Problem, need_grad: bool = True):
    """Unconstrained log density and its gradient.

    Returns ``(-inf, None)`` for states where the density is undefined.
    """
    lay, c = problem.layout, problem.config
    P, Q, K = problem.P, problem.Q, problem.K
    Pa = problem.P_alpha
    with np.errstate(all="ignore"):
        state = lay.constrain(theta)
        try:
            Psi, s, Z = polar_orthonormalize(state.X, return_factors=True)
        except NumericalError:
            return -np.inf, None
        sqrt_lam = np.sqrt(state.lam)
        scores = state.scores_raw * sqrt_lam

        lp = 0.0
        g = np.zeros(lay.size) if need_grad else None
        g_scores = np.zeros_like(scores)
        g_Psi = np.zeros_like(Psi)
        g_w = np.zeros(P * Q)
        g_logs2 = np.zeros(P)

        for p in range(P):
            blk = problem.blocks[p]
            if blk["n"] == 0:
                continue
            s2 = state.sigma2[p]
            r, Phi_obs = _block_residual(problem, p, state, Psi, scores)
            rr = float(r @ r)
            lp += -0.5 * blk["n"] * (LOG_2PI + np.log(s2)) - 0.5 * rr / s2
            if need_grad:
                rs = r / s2
                g_logs2[p] += -0.5 * blk["n"] + 0.5 * rr / s2
                g_w[p * Q:(p + 1) * Q] += problem.B_T.T @ (blk["to_time"] @ rs)
                g_scores += blk["to_subj"] @ (rs[:, None] * Phi_obs)
                g_Psi[p * Q:(p + 1) * Q] += problem.B_T.T @ (blk["to_time"] @ (rs[:, None] * scores[blk["subj"]]))

        # noise variances: inverse gamma prior + log Jacobian
        lp += np.sum(_inv_gamma_logpdf(state.sigma2, c.a_sigma, c.b_sigma) + np.log(state.sigma2))
        # eigenvalues: inverse gamma prior + ordered-positive Jacobian
        u = theta[lay["lam_u"]]
        lp += np.sum(_inv_gamma_logpdf(state.lam, c.a_lambda, c.b_lambda)) + np.sum(u)
        # mean smoothing
        lp += np.sum(_gamma_logpdf(state.h_mu, c.a_mu, c.b_mu) + np.log(state.h_mu))
        lp += np.sum(_gamma_logpdf(state.H, c.a_psi, c.b_psi) + np.log(state.H))
        quad_w = np.empty(P)
        quad_psi = np.empty((P, K))
        for p in range(P):
            w = problem.w_block(state.w_mu, p)
            Pw = Pa @ w
            quad_w[p] = w @ Pw
            Pp = problem.psi_block(Psi, p)
            PaPp = Pa @ Pp
            quad_psi[p] = np.einsum("qk,qk->k", Pp, PaPp)
            if need_grad:
                g_w[p * Q:(p + 1) * Q] -= state.h_mu[p] * Pw
                g_Psi[p * Q:(p + 1) * Q] -= PaPp * state.H[p]
        lp += np.sum(0.5 * Q * np.log(state.h_mu) - 0.5 * state.h_mu * quad_w)
        lp += np.sum(0.5 * Q * np.log(state.H) - 0.5 * state.H * quad_psi)
        lp += -0.5 * np.sum(state.X**2) - 0.5 * np.sum(state.scores_raw**2)
        lp -= 0.5 * LOG_2PI * (state.X.size + state.scores_raw.size)

        if not np.isfinite(lp):
            return -np.inf, None
        if not need_grad:
            return float(lp), None

        g[lay["log_sigma2"]] = g_logs2 - (c.a_sigma + 1.0) + c.b_sigma / state.sigma2 + 1.0
        g[lay["w_mu"]] = g_w
        g[lay["log_h_mu"]] = c.a_mu + 0.5 * Q - state.h_mu * (c.b_mu + 0.5 * quad_w)
        g[lay["log_H"]] = (c.a_psi + 0.5 * Q - state.H * (c.b_psi + 0.5 * quad_psi)).ravel()

        # d lp / d lam_j from the likelihood through scores = raw * sqrt(lam) and the prior
        g_lam = np.sum(g_scores * state.scores_raw, axis=0) / (2.0 * sqrt_lam)
        g_lam += -(c.a_lambda + 1.0) / state.lam + c.b_lambda / state.lam**2
        # lam_j = sum_{k<=j} exp(u_k)
        g[lay["lam_u"]] = np.exp(u) * np.cumsum(g_lam[::-1])[::-1] + 1.0

        g_X = polar_pullback(g_Psi, Psi, s, Z) - state.X
        g[lay["X"]] = g_X.ravel()
        g[lay["scores_raw"]] = (g_scores * sqrt_lam - state.scores_raw).ravel()
        if not np.all(np.isfinite(g)):
            return -np.inf, None
        return float(lp), g


def grad_log_posterior(state: ParameterState, problem: Problem) -> np.ndarray:
    """Gradient of the unconstrained log density at ``state`` (layout order)."""
    lp, g = log_density_and_grad(problem.layout.unconstrain(state), problem)
    if g is None:
        raise NumericalError("log density is not finite at this state")
    return g
