"""Orthonormal B-spline basis on [0, 1] and its smoothness penalties.

The raw B-splines on equally spaced knots are mapped to an L2-orthonormal
system by the symmetric inverse square root of their Gram matrix. Integrals
use composite Gauss-Legendre quadrature, which is exact for products of the
piecewise polynomials involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline

from .errors import ConfigurationError, DomainError, NumericalError

__all__ = [
    "KnotVector",
    "QuadratureRule",
    "OrthoBasis",
    "build_basis",
    "gauss_legendre_rule",
]


@dataclass(frozen=True)
class KnotVector:
    degree: int
    interior: np.ndarray

    @property
    def expanded(self) -> np.ndarray:
        d = self.degree
        return np.concatenate([np.zeros(d + 1), self.interior, np.ones(d + 1)])

    @property
    def n_basis(self) -> int:
        return len(self.interior) + self.degree + 1

    @property
    def breakpoints(self) -> np.ndarray:
        return np.concatenate([[0.0], self.interior, [1.0]])


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Integrate sampled values (first axis = nodes) over [0, 1]."""
        return np.tensordot(self.weights, values, axes=(0, 0))


def gauss_legendre_rule(breakpoints: np.ndarray, nodes_per_span: int) -> QuadratureRule:
    """Composite Gauss-Legendre rule over consecutive breakpoint intervals.

    A rule with ``n`` nodes per span integrates polynomials of degree
    ``2n - 1`` exactly on each span.
    """
    x, w = np.polynomial.legendre.leggauss(nodes_per_span)
    lo, hi = breakpoints[:-1], breakpoints[1:]
    half = 0.5 * (hi - lo)
    nodes = (lo[:, None] + half[:, None] * (x[None, :] + 1.0)).ravel()
    weights = (half[:, None] * w[None, :]).ravel()
    return QuadratureRule(nodes=nodes, weights=weights)


class OrthoBasis:
    """Q orthonormal splines ``B(t) = b(t) @ coeff`` on [0, 1].

    Parameters
    ----------
    knots : KnotVector
    coeff : ndarray of shape (Q, Q)
        Map from raw B-splines to the orthonormal system.
    quadrature : QuadratureRule
    p2 : ndarray of shape (Q, Q)
        Integrated squared second-derivative penalty.
    """

    def __init__(self, knots: KnotVector, coeff: np.ndarray, quadrature: QuadratureRule, p2: np.ndarray):
        self.knots = knots
        self.coeff = coeff
        self.quadrature = quadrature
        self.p2 = p2
        self.p0 = np.eye(coeff.shape[0])
        self._raw = BSpline(knots.expanded, np.eye(knots.n_basis), knots.degree, extrapolate=False)
        self._raw_d2 = self._raw.derivative(2)

    @property
    def Q(self) -> int:
        return self.coeff.shape[0]

    @property
    def degree(self) -> int:
        return self.knots.degree

    def _check_points(self, points) -> np.ndarray:
        t = np.asarray(points, dtype=float).ravel()
        if not np.all(np.isfinite(t)):
            raise DomainError("evaluation points must be finite")
        if t.size and (t.min() < -1e-12 or t.max() > 1.0 + 1e-12):
            raise DomainError(
                f"evaluation points must lie in [0, 1]; got range [{t.min():.6g}, {t.max():.6g}]"
            )
        return np.clip(t, 0.0, 1.0)

    def _raw_eval(self, spline: BSpline, t: np.ndarray) -> np.ndarray:
        out = spline(t)
        # extrapolate=False returns NaN at t == 1 for the right-closed end
        right = t >= 1.0
        if np.any(right):
            out[right] = spline(np.nextafter(1.0, 0.0))
        return out

    def evaluate(self, points) -> np.ndarray:
        """Basis values, shape ``(len(points), Q)``."""
        t = self._check_points(points)
        if t.size == 0:
            return np.zeros((0, self.Q))
        return self._raw_eval(self._raw, t) @ self.coeff

    def second_derivative(self, points) -> np.ndarray:
        t = self._check_points(points)
        if t.size == 0:
            return np.zeros((0, self.Q))
        return self._raw_eval(self._raw_d2, t) @ self.coeff

    def gram(self) -> np.ndarray:
        B = self.evaluate(self.quadrature.nodes)
        return B.T @ (self.quadrature.weights[:, None] * B)

    def penalty_alpha(self, alpha: float) -> np.ndarray:
        """Mixed penalty ``alpha * P0 + (1 - alpha) * P2``; positive definite for alpha > 0."""
        if not (0.0 < alpha <= 1.0):
            raise ConfigurationError(f"alpha must lie in (0, 1], got {alpha}")
        return alpha * self.p0 + (1.0 - alpha) * self.p2

    def to_csv(self, path, points) -> None:
        """Write basis values at ``points`` (one row per point, leading time column)."""
        t = np.asarray(points, dtype=float).ravel()
        B = self.evaluate(t)
        header = "time," + ",".join(f"B{q + 1}" for q in range(self.Q))
        np.savetxt(path, np.column_stack([t, B]), delimiter=",", header=header, comments="", fmt="%.17g")

    def penalty_to_csv(self, path, alpha: float | None = None) -> None:
        P = self.p2 if alpha is None else self.penalty_alpha(alpha)
        np.savetxt(path, P, delimiter=",", fmt="%.17g")


def build_basis(Q: int = 20, degree: int = 3, quad_points: int = 10) -> OrthoBasis:
    """Build the orthonormalized B-spline basis of dimension ``Q``.

    Parameters
    ----------
    Q : int
        Number of basis functions; at least ``degree + 2``.
    degree : int
        Spline degree, at least 2 so that second derivatives exist.
    quad_points : int
        Gauss-Legendre nodes per knot span. Products of two degree-``d``
        splines need ``quad_points >= d + 1`` for exact integration.

    Returns
    -------
    OrthoBasis
    """
    if degree < 2:
        raise ConfigurationError("spline degree must be at least 2 for a curvature penalty")
    if Q < degree + 2:
        raise ConfigurationError(f"Q={Q} too small for degree {degree}; need Q >= {degree + 2}")
    if quad_points < degree + 1:
        raise ConfigurationError(f"quad_points must be >= degree + 1 = {degree + 1} for exactness")

    n_interior = Q - degree - 1
    interior = np.linspace(0.0, 1.0, n_interior + 2)[1:-1]
    knots = KnotVector(degree=degree, interior=interior)
    rule = gauss_legendre_rule(knots.breakpoints, quad_points)

    raw = BSpline(knots.expanded, np.eye(Q), degree, extrapolate=False)
    Braw = raw(rule.nodes)
    gram = Braw.T @ (rule.weights[:, None] * Braw)
    evals, evecs = np.linalg.eigh(gram)
    if not np.all(np.isfinite(evals)) or evals.min() <= 0:
        raise NumericalError("raw B-spline Gram matrix is not positive definite")
    coeff = (evecs / np.sqrt(evals)) @ evecs.T

    D2 = raw.derivative(2)(rule.nodes) @ coeff
    p2 = D2.T @ (rule.weights[:, None] * D2)
    p2 = 0.5 * (p2 + p2.T)
    if not np.all(np.isfinite(p2)):
        raise NumericalError("non-finite curvature penalty")
    return OrthoBasis(knots=knots, coeff=coeff, quadrature=rule, p2=p2)
