"""Quadrature rules on the reference triangle {(s, t): s, t >= 0, s + t <= 1}."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass(frozen=True, eq=False)
class Quadrature:
    points: np.ndarray  # (nq, 2) reference coordinates
    weights: np.ndarray  # (nq,), sum to 1/2
    degree: int

    @property
    def barycentric(self) -> np.ndarray:
        s, t = self.points.T
        return np.column_stack([1.0 - s - t, s, t])


def _orbit3(a: float) -> list[tuple[float, float, float]]:
    b = 1.0 - 2.0 * a
    return [(b, a, a), (a, b, a), (a, a, b)]


def _orbit6(a: float, b: float) -> list[tuple[float, float, float]]:
    c = 1.0 - a - b
    return [(a, b, c), (b, c, a), (c, a, b), (b, a, c), (a, c, b), (c, b, a)]


@lru_cache(maxsize=None)
def dunavant6() -> Quadrature:
    """12-point symmetric rule, exact for polynomials of total degree 6."""
    groups = [
        (_orbit3(0.249286745170910421136), 0.116786275726379366030),
        (_orbit3(0.063089014491502228340), 0.050844906370206816921),
        (_orbit6(0.053145049844816947353, 0.310352451033784405416), 0.082851075618373575194),
    ]
    bary, w = [], []
    for pts, weight in groups:
        bary += pts
        w += [weight] * len(pts)
    bary = np.array(bary)
    return Quadrature(bary[:, 1:].copy(), 0.5 * np.array(w), 6)


@lru_cache(maxsize=None)
def collapsed_gauss(degree: int) -> Quadrature:
    """Duffy-collapsed tensor Gauss rule exact to ``degree``.

    Gauss-Jacobi(1, 0) in the collapsed direction absorbs the Jacobian, so
    ``ceil((degree + 1) / 2)`` points per direction suffice.
    """
    from scipy.special import roots_jacobi

    k = (degree + 2) // 2
    xg, wg = np.polynomial.legendre.leggauss(k)
    xj, wj = roots_jacobi(k, 1.0, 0.0)
    # map to [0, 1]: s along the collapsed edge, r radial
    r = 0.5 * (1.0 + xj)
    wr = wj / 4.0
    u = 0.5 * (1.0 + xg)
    wu = wg / 2.0
    R, U = np.meshgrid(r, u, indexing="ij")
    WR, WU = np.meshgrid(wr, wu, indexing="ij")
    # point (s, t) = ((1 - r) u, r) -- jacobian (1 - r) carried by the Jacobi weight
    points = np.column_stack([((1.0 - R) * U).ravel(), R.ravel()])
    weights = (WR * WU).ravel()
    return Quadrature(points, weights, degree)


def default_rule() -> Quadrature:
    return dunavant6()
