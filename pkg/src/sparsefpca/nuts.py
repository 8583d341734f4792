"""No-U-Turn sampler with multinomial trajectory sampling and a diagonal metric.

The transition follows the multinomial variant with the additional U-turn
checks across merged subtrees. Step size adaptation uses dual averaging;
the diagonal inverse metric is estimated from warmup draws.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DualAveraging", "NUTSKernel", "WarmupSchedule", "WelfordVariance"]

DIVERGENCE_THRESHOLD = 1000.0


class DualAveraging:
    """Nesterov dual averaging of log step size toward a target acceptance rate."""

    def __init__(self, step_size: float, target: float = 0.8, gamma: float = 0.05, t0: float = 10.0, kappa: float = 0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(step_size)

    def restart(self, step_size: float) -> None:
        self.mu = np.log(10.0 * step_size)
        self.counter = 0
        self.s_bar = 0.0
        self.x_bar = 0.0

    def update(self, accept_stat: float) -> float:
        self.counter += 1
        a = min(1.0, accept_stat)
        eta = 1.0 / (self.counter + self.t0)
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.target - a)
        x = self.mu - self.s_bar * np.sqrt(self.counter) / self.gamma
        x_eta = self.counter ** (-self.kappa)
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x
        return float(np.exp(x))

    @property
    def final_step_size(self) -> float:
        return float(np.exp(self.x_bar))


class WelfordVariance:
    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def add(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def regularized(self) -> np.ndarray:
        n = self.n
        var = self.m2 / max(n - 1, 1)
        return (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))


@dataclass
class _Tree:
    theta: np.ndarray
    r: np.ndarray
    grad: np.ndarray
    lp: float


class NUTSKernel:
    """One NUTS transition for a log density with gradient.

    Parameters
    ----------
    logp_grad : callable
        ``theta -> (logp, grad)``; ``logp = -inf`` marks an invalid point.
    """

    def __init__(self, logp_grad, dim: int, step_size: float = 0.1, inv_metric=None, max_depth: int = 10):
        self.logp_grad = logp_grad
        self.dim = dim
        self.step_size = step_size
        self.inv_metric = np.ones(dim) if inv_metric is None else np.asarray(inv_metric, dtype=float)
        self.max_depth = max_depth

    # -- helpers ---------------------------------------------------------
    def _leapfrog(self, z: _Tree, eps: float) -> _Tree:
        r = z.r + 0.5 * eps * z.grad
        theta = z.theta + eps * self.inv_metric * r
        lp, grad = self.logp_grad(theta)
        if grad is None or not np.isfinite(lp):
            return _Tree(theta, r, np.zeros_like(r), -np.inf)
        r = r + 0.5 * eps * grad
        return _Tree(theta, r, grad, lp)

    def _hamiltonian(self, z: _Tree) -> float:
        if not np.isfinite(z.lp):
            return np.inf
        return -z.lp + 0.5 * float(np.dot(z.r, self.inv_metric * z.r))

    @staticmethod
    def _no_uturn(p_sharp_minus, p_sharp_plus, rho) -> bool:
        return float(p_sharp_plus @ rho) > 0 and float(p_sharp_minus @ rho) > 0

    def _build(self, z: _Tree, depth: int, direction: int, H0: float, rng, stats: dict):
        """Returns ``(valid, z_end, proposal, log_w, rho, p_beg, p_sharp_beg, p_end, p_sharp_end)``."""
        if depth == 0:
            z1 = self._leapfrog(z, direction * self.step_size)
            stats["n_leapfrog"] += 1
            H = self._hamiltonian(z1)
            if not np.isfinite(H) or H - H0 > DIVERGENCE_THRESHOLD:
                stats["divergent"] = True
                return (False, z1, None, -np.inf, None, None, None, None, None)
            stats["sum_metro"] += 1.0 if H0 - H > 0 else float(np.exp(H0 - H))
            p_sharp = self.inv_metric * z1.r
            return (True, z1, z1, H0 - H, z1.r.copy(), z1.r, p_sharp, z1.r, p_sharp)

        (ok1, z_mid, prop1, lw1, rho1, p_beg, ps_beg, p_end1, ps_end1) = self._build(z, depth - 1, direction, H0, rng, stats)
        if not ok1:
            return (False, z_mid, None, -np.inf, None, None, None, None, None)
        (ok2, z_end, prop2, lw2, rho2, p_beg2, ps_beg2, p_end, ps_end) = self._build(z_mid, depth - 1, direction, H0, rng, stats)
        if not ok2:
            return (False, z_end, None, -np.inf, None, None, None, None, None)
        lw = np.logaddexp(lw1, lw2)
        proposal = prop2 if (lw2 > lw or rng.uniform() < np.exp(lw2 - lw)) else prop1
        rho = rho1 + rho2
        ok = self._no_uturn(ps_beg, ps_end, rho)
        ok = ok and self._no_uturn(ps_beg, ps_beg2, rho1 + p_beg2)
        ok = ok and self._no_uturn(ps_end1, ps_end, rho2 + p_end1)
        return (ok, z_end, proposal, lw, rho, p_beg, ps_beg, p_end, ps_end)

    # -- public ----------------------------------------------------------
    def step(self, theta: np.ndarray, rng, lp=None, grad=None):
        """Draw the next state; returns ``(theta, lp, grad, info)``."""
        if lp is None or grad is None:
            lp, grad = self.logp_grad(theta)
        if grad is None or not np.isfinite(lp):
            raise ValueError("NUTS started from a point with non-finite log density")
        r0 = rng.normal(size=self.dim) / np.sqrt(self.inv_metric)
        z0 = _Tree(theta, r0, grad, lp)
        H0 = self._hamiltonian(z0)

        z_minus = z_plus = z0
        sample = z0
        log_w = 0.0
        p_sharp0 = self.inv_metric * r0
        p_bck_bck = p_bck_fwd = p_fwd_bck = p_fwd_fwd = r0
        ps_bck_bck = ps_bck_fwd = ps_fwd_bck = ps_fwd_fwd = p_sharp0
        rho = r0.copy()
        stats = {"n_leapfrog": 0, "sum_metro": 0.0, "divergent": False}
        depth = 0
        while depth < self.max_depth:
            if rng.uniform() > 0.5:
                rho_bck = rho
                (ok, z_plus, prop, lw_sub, rho_fwd, p_fwd_bck, ps_fwd_bck, p_fwd_fwd, ps_fwd_fwd) = \
                    self._build(z_plus, depth, 1, H0, rng, stats)
            else:
                rho_fwd = rho
                (ok, z_minus, prop, lw_sub, rho_bck, p_bck_fwd, ps_bck_fwd, p_bck_bck, ps_bck_bck) = \
                    self._build(z_minus, depth, -1, H0, rng, stats)
            if not ok:
                break
            depth += 1
            if lw_sub > log_w or rng.uniform() < np.exp(lw_sub - log_w):
                sample = prop
            log_w = np.logaddexp(log_w, lw_sub)
            rho = rho_bck + rho_fwd
            persist = self._no_uturn(ps_bck_bck, ps_fwd_fwd, rho)
            persist = persist and self._no_uturn(ps_bck_bck, ps_fwd_bck, rho_bck + p_fwd_bck)
            persist = persist and self._no_uturn(ps_bck_fwd, ps_fwd_fwd, rho_fwd + p_bck_fwd)
            if not persist:
                break
        n = max(stats["n_leapfrog"], 1)
        info = {
            "accept_stat": stats["sum_metro"] / n,
            "n_leapfrog": stats["n_leapfrog"],
            "depth": depth,
            "divergent": stats["divergent"],
            "step_size": self.step_size,
        }
        return sample.theta, sample.lp, sample.grad, info

    def find_reasonable_step_size(self, theta: np.ndarray, rng, lp=None, grad=None) -> float:
        """Double or halve the step size until one-step acceptance crosses 0.8."""
        if lp is None or grad is None:
            lp, grad = self.logp_grad(theta)
        eps = self.step_size
        r = rng.normal(size=self.dim) / np.sqrt(self.inv_metric)
        z0 = _Tree(theta, r, grad, lp)
        H0 = self._hamiltonian(z0)
        z1 = self._leapfrog(z0, eps)
        delta = H0 - self._hamiltonian(z1)
        direction = 1 if delta > np.log(0.8) else -1
        for _ in range(100):
            z1 = self._leapfrog(z0, eps)
            delta = H0 - self._hamiltonian(z1)
            if direction == 1 and not delta > np.log(0.8):
                break
            if direction == -1 and not delta < np.log(0.8):
                break
            eps = eps * 2.0 if direction == 1 else eps * 0.5
            if eps > 1e7 or eps < 1e-10:
                break
        self.step_size = float(eps)
        return self.step_size


class WarmupSchedule:
    """Step-size and metric adaptation over ``n_warmup`` iterations.

    The first 75% adapts the step size by dual averaging while the second half
    of that window accumulates draws for the diagonal metric. At the 75% mark
    the metric is installed and dual averaging restarts for the final 25%.
    """

    def __init__(self, kernel: NUTSKernel, n_warmup: int, target_accept: float = 0.8,
                 adapt_metric: bool = True, restarts=()):
        self.kernel = kernel
        self.restarts = set(restarts)
        self.adapt_metric = adapt_metric
        self.n_warmup = n_warmup
        self.metric_end = int(0.75 * n_warmup)
        self.metric_start = self.metric_end // 2
        self.da = DualAveraging(kernel.step_size, target=target_accept)
        self.var = WelfordVariance(kernel.dim)
        self.iteration = 0

    def update(self, theta: np.ndarray, accept_stat: float, rng, lp=None, grad=None) -> None:
        it = self.iteration
        self.iteration += 1
        if it >= self.n_warmup:
            return
        self.kernel.step_size = self.da.update(accept_stat)
        if self.adapt_metric and self.metric_start <= it < self.metric_end:
            self.var.add(theta)
        if it + 1 == self.metric_end:
            # a fresh dual-averaging window forgets step sizes tuned to early,
            # unrepresentative iterations
            if self.adapt_metric and self.var.n >= 10:
                self.kernel.inv_metric = self.var.regularized()
                self.kernel.find_reasonable_step_size(theta, rng, lp, grad)
            self.da.restart(self.kernel.step_size)
        elif it + 1 in self.restarts:
            self.da.restart(self.kernel.step_size)
        if it + 1 == self.n_warmup:
            self.kernel.step_size = self.da.final_step_size
