"""Closed-form full conditionals and their Gibbs updates.

Each ``*_conditional`` function returns the parameters of a conditional law
so tests can compare against independent oracles; the matching ``gibbs_*``
function draws from it. Gamma laws use the shape/rate convention.
"""

from __future__ import annotations

import numpy as np
from scipy import special, stats

from .errors import NumericalError
from .model import ParameterState, Problem, polar_orthonormalize, polar_pullback

__all__ = [
    "residuals",
    "sigma2_conditional",
    "gibbs_sigma2",
    "lambda_conditional",
    "gibbs_lambda",
    "smoothing_conditional",
    "gibbs_smoothing",
    "wmu_conditional",
    "gibbs_wmu",
    "wmu_marginal_conditional",
    "gibbs_wmu_collapsed",
    "score_conditional",
    "gibbs_scores",
    "sample_truncated_inv_gamma",
    "gibbs_lambda_noncentered",
    "lambda_noncentered_coefficients",
    "XConditional",
    "gibbs_polar_radius",
    "gibbs_rotations",
    "rotation_coefficients",
]


def _fits(problem: Problem, state: ParameterState, p: int, Psi=None, scores=None):
    """Mean fit and FPC fit at variable ``p``'s observations."""
    blk = problem.blocks[p]
    Psi = state.Psi if Psi is None else Psi
    scores = state.scores if scores is None else scores
    mu = problem.B_T @ problem.w_block(state.w_mu, p)
    Phi_obs = (problem.B_T @ problem.psi_block(Psi, p))[blk["tidx"]]
    fpc = np.einsum("lk,lk->l", Phi_obs, scores[blk["subj"]])
    return mu[blk["tidx"]], fpc, Phi_obs


def residuals(problem: Problem, state: ParameterState, p: int) -> np.ndarray:
    """Full residuals ``y - B(w_mu + Psi xi)`` for variable ``p``."""
    mu, fpc, _ = _fits(problem, state, p)
    return problem.blocks[p]["y"] - mu - fpc


_BIG = np.finfo(float).max


def _safe_inverse(rate, g):
    """``rate / g`` capped at the largest float; vague priors can underflow ``g``."""
    with np.errstate(divide="ignore", over="ignore"):
        return np.minimum(rate / g, _BIG)


# -- noise variances --------------------------------------------------------


def sigma2_conditional(state: ParameterState, problem: Problem):
    """Inverse-gamma ``(shape, rate)`` arrays for each noise variance."""
    c = problem.config
    shape = np.empty(problem.P)
    rate = np.empty(problem.P)
    for p in range(problem.P):
        r = residuals(problem, state, p)
        shape[p] = c.a_sigma + 0.5 * r.size
        rate[p] = c.b_sigma + 0.5 * float(r @ r)
    return shape, rate


def gibbs_sigma2(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    shape, rate = sigma2_conditional(state, problem)
    state.sigma2 = _safe_inverse(rate, rng.gamma(shape))
    return state.sigma2


# -- eigenvalues ------------------------------------------------------------


def lambda_conditional(scores: np.ndarray, a: float, b: float):
    """Unconstrained inverse-gamma ``(shape, rate)`` for each eigenvalue given scores."""
    n = scores.shape[0]
    shape = np.full(scores.shape[1], a + 0.5 * n)
    rate = b + 0.5 * np.sum(scores**2, axis=0)
    return shape, rate


def sample_truncated_inv_gamma(shape: float, rate: float, lo: float, hi: float, rng) -> float:
    """Inverse-gamma draw restricted to ``(lo, hi)`` by inverting the CDF of ``1 / x``."""
    # 1/x ~ Gamma(shape, rate) truncated to (1/hi, 1/lo)
    g_lo = 0.0 if not np.isfinite(hi) else rate / hi
    g_hi = np.inf if lo <= 0 else rate / lo
    # work in whichever tail keeps precision
    p_lo = special.gammainc(shape, g_lo)
    p_hi = 1.0 if not np.isfinite(g_hi) else special.gammainc(shape, g_hi)
    if p_lo < 0.5:
        u = p_lo + rng.uniform() * (p_hi - p_lo)
        g = special.gammaincinv(shape, u)
    else:
        q_lo = special.gammaincc(shape, g_lo)
        q_hi = 0.0 if not np.isfinite(g_hi) else special.gammaincc(shape, g_hi)
        u = q_hi + rng.uniform() * (q_lo - q_hi)
        g = special.gammainccinv(shape, u)
    x = float(_safe_inverse(rate, g))
    # guard against round-off at the interval ends
    upper = np.nextafter(hi, -np.inf) if np.isfinite(hi) else _BIG
    return float(np.clip(x, np.nextafter(lo, np.inf), upper))


def gibbs_lambda(state: ParameterState, problem: Problem, rng, method: str = "truncated") -> dict:
    """Update eigenvalues given the current (centered) scores.

    ``method="truncated"`` sweeps the components, drawing each from its
    inverse-gamma conditional truncated between its neighbours.
    ``method="reject"`` draws all components jointly from the unconstrained
    conditionals and keeps the current values if the draw is not ascending.
    Both leave the ordered conditional invariant. Scores are held fixed, so
    ``scores_raw`` is rescaled.
    """
    c = problem.config
    scores = state.scores
    shape, rate = lambda_conditional(scores, c.a_lambda, c.b_lambda)
    K = problem.K
    retained = False
    if method == "reject":
        prop = _safe_inverse(rate, rng.gamma(shape))
        if np.all(np.diff(prop) > 0):
            lam = prop
        else:
            lam = state.lam.copy()
            retained = True
    elif method == "truncated":
        lam = state.lam.copy()
        for k in range(K):
            lo = lam[k - 1] if k > 0 else 0.0
            hi = lam[k + 1] if k < K - 1 else np.inf
            lam[k] = sample_truncated_inv_gamma(shape[k], rate[k], lo, hi, rng)
    else:
        raise ValueError(f"unknown lambda update method {method!r}")
    state.lam = lam
    state.scores_raw = scores / np.sqrt(lam)
    return {"retained": retained}


def _slice_sample(logf, x0: float, lo: float, hi: float, rng, width: float = 1.0, max_steps: int = 50) -> float:
    """Univariate slice sampler with stepping out, restricted to ``(lo, hi)``."""
    y = logf(x0) + np.log(rng.uniform())
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(max_steps * rng.uniform())
    k = max_steps - 1 - j
    while j > 0 and left > lo and logf(left) > y:
        left -= width
        j -= 1
    while k > 0 and right < hi and logf(right) > y:
        right += width
        k -= 1
    left, right = max(left, lo), min(right, hi)
    for _ in range(200):
        x1 = left + (right - left) * rng.uniform()
        if logf(x1) > y:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    return x0


def lambda_noncentered_coefficients(state: ParameterState, problem: Problem, k: int):
    """``(c1, c2)`` such that the log-likelihood in ``a = sqrt(lambda_k)`` is ``c1 a - c2 a^2 / 2`` + const.

    Raw scores are held fixed, so ``xi_ik = a * raw_ik``.
    """
    Psi = state.Psi
    raw = state.scores_raw
    scores = state.scores
    c1 = c2 = 0.0
    for p in range(problem.P):
        blk = problem.blocks[p]
        if blk["n"] == 0:
            continue
        mu, fpc, Phi_obs = _fits(problem, state, p, Psi=Psi, scores=scores)
        v = Phi_obs[:, k] * raw[blk["subj"], k]
        r = blk["y"] - mu - fpc + v * np.sqrt(state.lam[k])
        c1 += float(r @ v) / state.sigma2[p]
        c2 += float(v @ v) / state.sigma2[p]
    return c1, c2


def gibbs_lambda_noncentered(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    """Update each eigenvalue with the raw scores fixed (slice sampling on ``log lambda_k``).

    Paired with :func:`gibbs_lambda`, which holds the scores fixed, this
    interweaves the two parameterizations; it matters when a component is
    weakly identified and the centered update alone crawls.
    """
    c = problem.config
    a0, b0 = c.a_lambda, c.b_lambda
    K = problem.K
    lam = state.lam.copy()
    for k in range(K):
        state.lam = lam
        c1, c2 = lambda_noncentered_coefficients(state, problem, k)

        def logf(u, c1=c1, c2=c2):
            a = np.exp(0.5 * u)
            # IG(a0, b0) prior on lambda = e^u plus the log Jacobian u
            return c1 * a - 0.5 * c2 * a * a - a0 * u - b0 * np.exp(-u)

        lo = np.log(lam[k - 1]) if k > 0 else -np.inf
        hi = np.log(lam[k + 1]) if k < K - 1 else np.inf
        lam[k] = np.exp(_slice_sample(logf, float(np.log(lam[k])), lo, hi, rng))
    state.lam = lam
    return lam


# -- rotations within the FPC span -------------------------------------------


def _givens(K: int, j: int, k: int, theta: float) -> np.ndarray:
    G = np.eye(K)
    c, s = np.cos(theta), np.sin(theta)
    G[j, j] = G[k, k] = c
    G[j, k] = -s
    G[k, j] = s
    return G


def rotation_coefficients(state: ParameterState, problem: Problem, j: int, k: int):
    """Coefficients of the log target along the rotation of components ``j, k``.

    Rotating X and the scores by the same Givens rotation of angle ``theta``
    leaves the fit and the X prior unchanged; only the score prior and the
    smoothing penalties vary. With ``c = cos theta`` and ``s = sin theta``
    the log target is ``-(A c^2 + 2 Bc c s + C s^2) / 2`` up to a constant.
    """
    xi = state.scores
    Psi = state.Psi
    lj, lk = state.lam[j], state.lam[k]
    a, b = xi[:, j], xi[:, k]
    aa, ab, bb = a @ a, a @ b, b @ b
    Pa = problem.P_alpha
    # score prior: new_j = c a + s b over lam_j, new_k = -s a + c b over lam_k
    A = aa / lj + bb / lk
    Bc = ab / lj - ab / lk
    C = bb / lj + aa / lk
    for p in range(problem.P):
        Pp = problem.psi_block(Psi, p)
        u, v = Pp[:, j], Pp[:, k]
        uu, uv, vv = u @ Pa @ u, u @ Pa @ v, v @ Pa @ v
        hj, hk = state.H[p, j], state.H[p, k]
        A += hj * uu + hk * vv
        Bc += hj * uv - hk * uv
        C += hj * vv + hk * uu
    return A, Bc, C


def gibbs_rotations(state: ParameterState, problem: Problem, rng) -> None:
    """Exact conditional moves along Givens rotations of every component pair.

    For each pair the angle is drawn from its conditional on the rotation
    orbit by slice sampling; the map has unit Jacobian and the rotation group
    carries uniform Haar measure, so the move leaves the posterior invariant.
    """
    K = problem.K
    for j in range(K):
        for k in range(j + 1, K):
            A, Bc, C = rotation_coefficients(state, problem, j, k)

            def logf(t, A=A, Bc=Bc, C=C):
                c, s = np.cos(t), np.sin(t)
                return -0.5 * (A * c * c + 2.0 * Bc * c * s + C * s * s)

            theta = _slice_sample(logf, 0.0, -np.pi, np.pi, rng, width=0.5)
            if theta == 0.0:
                continue
            G = _givens(K, j, k, theta)
            xi = state.scores @ G
            state.set_X(state.X @ G)
            state.scores_raw = xi / np.sqrt(state.lam)


# -- smoothing parameters ---------------------------------------------------


def smoothing_conditional(state: ParameterState, problem: Problem):
    """Gamma ``(shape, rate)`` for ``h_mu`` (P,) and ``H`` (P, K)."""
    c = problem.config
    Q, Pa = problem.Q, problem.P_alpha
    Psi = state.Psi
    quad_w = np.array([problem.w_block(state.w_mu, p) @ Pa @ problem.w_block(state.w_mu, p)
                       for p in range(problem.P)])
    quad_psi = np.array([np.einsum("qk,qr,rk->k", problem.psi_block(Psi, p), Pa, problem.psi_block(Psi, p))
                         for p in range(problem.P)])
    h_shape = np.full(problem.P, c.a_mu + 0.5 * Q)
    h_rate = c.b_mu + 0.5 * quad_w
    H_shape = np.full((problem.P, problem.K), c.a_psi + 0.5 * Q)
    H_rate = c.b_psi + 0.5 * quad_psi
    return (h_shape, h_rate), (H_shape, H_rate)


def gibbs_smoothing(state: ParameterState, problem: Problem, rng):
    (hs, hr), (Hs, Hr) = smoothing_conditional(state, problem)
    state.h_mu = rng.gamma(hs) / hr
    state.H = rng.gamma(Hs) / Hr
    return state.h_mu, state.H


# -- mean spline weights ----------------------------------------------------


def wmu_conditional(state: ParameterState, problem: Problem, p: int):
    """Mean and covariance of ``w_mu`` block ``p`` given everything else."""
    blk = problem.blocks[p]
    s2 = state.sigma2[p]
    _, fpc, _ = _fits(problem, state, p)
    D = blk["y"] - fpc
    B = blk["B"]
    prec = state.h_mu[p] * problem.P_alpha + (B.T @ B) / s2
    prec = 0.5 * (prec + prec.T)
    rhs = B.T @ D / s2
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    cov = np.linalg.inv(prec)
    return mean, 0.5 * (cov + cov.T), L


def gibbs_wmu(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    Q = problem.Q
    w = state.w_mu.copy()
    for p in range(problem.P):
        mean, _, L = wmu_conditional(state, problem, p)
        w[p * Q:(p + 1) * Q] = mean + np.linalg.solve(L.T, rng.normal(size=Q))
        state.w_mu = w
    return state.w_mu


def wmu_marginal_conditional(state: ParameterState, problem: Problem):
    """Mean and precision of all mean weights given Psi, sigma2, lambda, h_mu, with scores integrated out.

    Each subject contributes ``B_i^T V_i^{-1} B_i`` with
    ``V_i = Phi_i Lambda Phi_i^T + D_i``; by the Woodbury identity this is
    ``B_i^T D^{-1} B_i - F_i S_i^{-1} F_i^T`` where ``S_i`` is the score
    precision and ``F_i = B_i^T D^{-1} Phi_i``.
    """
    N, K, Q, P = problem.N, problem.K, problem.Q, problem.P
    Psi = state.Psi
    prec = np.zeros((P * Q, P * Q))
    rhs = np.zeros(P * Q)
    F = np.zeros((N, P * Q, K))
    S = np.zeros((N, K, K))
    g = np.zeros((N, K))
    for p in range(P):
        blk = problem.blocks[p]
        sl = slice(p * Q, (p + 1) * Q)
        prec[sl, sl] += state.h_mu[p] * problem.P_alpha
        if blk["n"] == 0:
            continue
        s2 = state.sigma2[p]
        B = blk["B"]
        Phi_obs = (problem.B_T @ problem.psi_block(Psi, p))[blk["tidx"]]
        prec[sl, sl] += B.T @ B / s2
        rhs[sl] += B.T @ blk["y"] / s2
        outer = (B[:, :, None] * Phi_obs[:, None, :]).reshape(blk["n"], Q * K)
        F[:, sl, :] = (blk["to_subj"] @ outer).reshape(N, Q, K) / s2
        pp_outer = (Phi_obs[:, :, None] * Phi_obs[:, None, :]).reshape(blk["n"], K * K)
        S += (blk["to_subj"] @ pp_outer).reshape(N, K, K) / s2
        g += blk["to_subj"] @ (Phi_obs * blk["y"][:, None]) / s2
    S[:, np.arange(K), np.arange(K)] += 1.0 / state.lam
    S = 0.5 * (S + np.swapaxes(S, 1, 2))
    Sinv_Ft = np.linalg.solve(S, np.swapaxes(F, 1, 2))  # (N, K, PQ)
    prec -= np.einsum("nqk,nkr->qr", F, Sinv_Ft)
    rhs -= np.einsum("nkq,nk->q", Sinv_Ft, g)
    prec = 0.5 * (prec + prec.T)
    L = np.linalg.cholesky(prec)
    mean = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
    return mean, prec, L


def gibbs_wmu_collapsed(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    """Draw all mean weights jointly with the scores integrated out.

    Must be followed by a score update to form a valid blocked step.
    """
    mean, _, L = wmu_marginal_conditional(state, problem)
    state.w_mu = mean + np.linalg.solve(L.T, rng.normal(size=mean.size))
    return state.w_mu


# -- scores -----------------------------------------------------------------


def score_conditional(state: ParameterState, problem: Problem):
    """Per-subject conditional mean (N, K) and precision (N, K, K) of the scores."""
    N, K = problem.N, problem.K
    prec = np.zeros((N, K, K))
    rhs = np.zeros((N, K))
    Psi = state.Psi
    for p in range(problem.P):
        blk = problem.blocks[p]
        if blk["n"] == 0:
            continue
        s2 = state.sigma2[p]
        mu, _, Phi_obs = _fits(problem, state, p, Psi=Psi)
        R = blk["y"] - mu
        outer = (Phi_obs[:, :, None] * Phi_obs[:, None, :]).reshape(blk["n"], K * K)
        prec += (blk["to_subj"] @ outer).reshape(N, K, K) / s2
        rhs += blk["to_subj"] @ (Phi_obs * R[:, None]) / s2
    prec[:, np.arange(K), np.arange(K)] += 1.0 / state.lam
    prec = 0.5 * (prec + np.swapaxes(prec, 1, 2))
    mean = np.linalg.solve(prec, rhs[:, :, None])[:, :, 0]
    return mean, prec


def gibbs_scores(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    mean, prec = score_conditional(state, problem)
    L = np.linalg.cholesky(prec)
    z = rng.normal(size=mean.shape)
    # prec = L L^T  =>  L^{-T} z has covariance prec^{-1}
    dev = np.linalg.solve(np.swapaxes(L, 1, 2), z[:, :, None])[:, :, 0]
    xi = mean + dev
    state.scores_raw = xi / np.sqrt(state.lam)
    return xi


# -- FPC weights given everything else (target for the gradient kernel) -----


def gibbs_polar_radius(state: ParameterState, problem: Problem, rng) -> np.ndarray:
    """Redraw the non-identified part of X, keeping ``Psi(X)`` fixed.

    Under the isotropic Gaussian prior the polar factor of X is Haar
    distributed and independent of ``X^T X ~ Wishart(PQ, I_K)``. The
    likelihood only sees the polar factor, so ``X = Psi W^{1/2}`` with a fresh
    Wishart ``W`` is an exact conditional draw.
    """
    PQ, K = problem.P * problem.Q, problem.K
    W = stats.wishart.rvs(df=PQ, scale=np.eye(K), random_state=rng)
    W = np.atleast_2d(W)
    ev, V = np.linalg.eigh(W)
    X = state.Psi @ (V * np.sqrt(ev)) @ V.T
    state.set_X(X, Psi=state.Psi)
    return X


class XConditional:
    """Log density of X given the other parameters, from sufficient statistics.

    For each variable the likelihood is quadratic in ``vec(Psi_p)``; the
    precision ``A_p`` (including the smoothing penalty) and linear term
    ``c_p`` are formed once per sweep so each gradient costs
    ``O(P (QK)^2)`` rather than a pass over the data.

    With ``rotated=True`` the density is over ``Z = (I_P kron E^T) X`` where
    ``E`` holds the eigenvectors of the penalty. The polar map commutes with
    this rotation and the prior on X is isotropic, so the target is the same
    distribution in different coordinates; the penalty becomes diagonal,
    which lets a diagonal mass matrix absorb its stiff directions.
    """

    def __init__(self, state: ParameterState, problem: Problem, rotated: bool = False):
        self.problem = problem
        self.rotated = rotated
        P, Q, K = problem.P, problem.Q, problem.K
        self.shape = (P * Q, K)
        scores = state.scores
        self.A = []
        self.c = []
        self.data_diag = []
        self.H = np.array(state.H, dtype=float)
        for p in range(P):
            blk = problem.blocks[p]
            s2 = state.sigma2[p]
            if blk["n"]:
                mu = (problem.B_T @ problem.w_block(state.w_mu, p))[blk["tidx"]]
                R = blk["y"] - mu
                G = (blk["B"][:, :, None] * scores[blk["subj"]][:, None, :]).reshape(blk["n"], Q * K)
                A = G.T @ G / s2
                c = G.T @ R / s2
            else:
                A = np.zeros((Q * K, Q * K))
                c = np.zeros(Q * K)
            pen = np.kron(problem.P_alpha, np.diag(state.H[p]))
            if rotated:
                T = np.kron(problem.penalty_vecs, np.eye(K))
                A = T.T @ A @ T
                c = T.T @ c
                pen = np.kron(np.diag(problem.penalty_eig), np.diag(state.H[p]))
            self.data_diag.append(np.diag(A).copy())
            A = A + pen
            self.A.append(0.5 * (A + A.T))
            self.c.append(c)

    def inverse_metric(self) -> np.ndarray:
        """Diagonal inverse mass matrix matched to the current conditional.

        Curvature along ``z`` is roughly ``1 + diag(A) / r^2`` where ``r^2`` is
        the squared column norm, whose conditional mean is ``P*Q`` because the
        likelihood depends on X only through its polar factor. The result uses
        no information from X itself, so it may change between sweeps.
        """
        P, Q, K = self.problem.P, self.problem.Q, self.problem.K
        PQ = P * Q
        d = np.concatenate([np.diag(A) for A in self.A]).reshape(PQ, K)
        dd = np.concatenate(self.data_diag).reshape(PQ, K)
        pen = d - dd
        # moving column k toward another column rotates both polar columns, so
        # the data curvature of the others enters along in-span directions; the
        # penalty of the others leaks through the off-diagonal of (X^T X)^{-1/2}
        others = lambda a: a.sum(axis=1, keepdims=True) - a
        leak = others(dd) + others(pen) / PQ
        leak += self._rotation_curvature()
        return (1.0 / (1.0 + (d + leak) / PQ)).ravel()

    def _rotation_curvature(self) -> np.ndarray:
        # Rotating Psi columns j and k into each other trades their smoothing
        # penalties. With roughness psi^T P psi ~ Q / H (the Gamma conditional
        # of H), the second derivative in the angle is about
        # sum_p Q (H_pj / H_pk + H_pk / H_pj - 2). A coordinate moves the angle
        # in proportion to psi_j there, whose squared size is guessed from the
        # prior shape implied by H.
        P, Q, K = self.problem.P, self.problem.Q, self.problem.K
        H = np.maximum(self.H, 1e-12)
        ratio = H[:, :, None] / H[:, None, :]
        curv = Q * np.sum(ratio + np.swapaxes(ratio, 1, 2) - 2.0, axis=0)  # (K, K)
        e = self.problem.penalty_eig
        v = 1.0 / (1.0 + H[:, None, :] * e[None, :, None])  # (P, Q, K)
        m = v / v.sum(axis=(0, 1), keepdims=True)
        out = np.einsum("pqj,jk->pqk", m, curv)
        return out.reshape(P * Q, K)

    def encode(self, X: np.ndarray) -> np.ndarray:
        """Map X to the sampling coordinates (flattened)."""
        if not self.rotated:
            return X.ravel()
        P, Q, K = self.problem.P, self.problem.Q, self.problem.K
        E = self.problem.penalty_vecs
        return np.einsum("qr,pqk->prk", E, X.reshape(P, Q, K)).ravel()

    def decode(self, z: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`encode`, returning X with shape ``(P*Q, K)``."""
        if not self.rotated:
            return z.reshape(self.shape).copy()
        P, Q, K = self.problem.P, self.problem.Q, self.problem.K
        E = self.problem.penalty_vecs
        return np.einsum("qr,prk->pqk", E, z.reshape(P, Q, K)).reshape(self.shape)

    def __call__(self, x_flat: np.ndarray):
        X = x_flat.reshape(self.shape)
        try:
            Psi, s, Z = polar_orthonormalize(X, return_factors=True)
        except NumericalError:
            return -np.inf, None
        Q, K = self.problem.Q, self.problem.K
        lp = -0.5 * float(x_flat @ x_flat)
        G = np.empty_like(Psi)
        for p in range(self.problem.P):
            v = Psi[p * Q:(p + 1) * Q].ravel()
            Av = self.A[p] @ v
            lp += float(self.c[p] @ v) - 0.5 * float(v @ Av)
            G[p * Q:(p + 1) * Q] = (self.c[p] - Av).reshape(Q, K)
        grad = polar_pullback(G, Psi, s, Z) - X
        return lp, grad.ravel()
