"""Exact optimal transport between distributions on a uniform 1-D grid.

Two cost conventions coexist and are kept apart by name:

* ``half_cost(p, q)`` is the optimal value for ``c(a, b) = (a - b)^2 / 2``;
  Kantorovich potentials refer to this cost.
* ``w2_squared(p, q)`` is the squared 2-Wasserstein metric, ``2 * half_cost``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ActionGrid:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 1 or pts.shape[0] < 1:
            raise ValueError("grid needs at least one point")
        if pts.shape[0] > 1:
            d = np.diff(pts)
            if not np.all(d > 0):
                raise ValueError("grid points must be strictly increasing")
            if np.max(np.abs(d - d[0])) > 1e-12 * max(1.0, abs(d[0])):
                raise ValueError("grid spacing must be uniform")
        object.__setattr__(self, "points", pts)

    @classmethod
    def uniform(cls, n: int = 21, low: float = -1.0, high: float = 1.0) -> "ActionGrid":
        return cls(np.linspace(low, high, n))

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def spacing(self) -> float:
        return float(self.points[1] - self.points[0]) if self.n > 1 else 0.0

    def __eq__(self, other):
        return isinstance(other, ActionGrid) and np.array_equal(self.points, other.points)

    def __hash__(self):
        return hash(self.points.tobytes())


class GridDistribution:
    """Probability weights on an :class:`ActionGrid`."""

    def __init__(self, grid: ActionGrid, weights):
        w = np.asarray(weights, dtype=np.float64).copy()
        if w.shape != (grid.n,):
            raise ValueError(f"expected {grid.n} weights, got shape {w.shape}")
        if not np.all(np.isfinite(w)) or np.any(w < -1e-15):
            raise ValueError("weights must be finite and non-negative")
        w[w < 0] = 0.0
        total = w.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"weights must sum to 1, got {total!r}")
        self.grid = grid
        self.weights = w / total

    @classmethod
    def uniform(cls, grid: ActionGrid) -> "GridDistribution":
        return cls(grid, np.full(grid.n, 1.0 / grid.n))

    @classmethod
    def dirac(cls, grid: ActionGrid, index: int) -> "GridDistribution":
        w = np.zeros(grid.n)
        w[index] = 1.0
        return cls(grid, w)

    @property
    def support(self) -> np.ndarray:
        return self.weights > 0

    def mean(self) -> float:
        return float(self.weights @ self.grid.points)

    def second_moment(self, about: float | None = None) -> float:
        c = self.mean() if about is None else about
        return float(self.weights @ (self.grid.points - c) ** 2)

    def __repr__(self):
        return f"GridDistribution(n={self.grid.n}, mean={self.mean():.4g})"


@dataclass(frozen=True)
class PotentialPair:
    phi: np.ndarray
    psi: np.ndarray


def _unpack(*dists):
    grid = dists[0].grid
    for d in dists[1:]:
        if d.grid != grid:
            raise ValueError("distributions live on different grids")
    return grid.points, [d.weights for d in dists]


def _cost(points) -> np.ndarray:
    return 0.5 * (points[:, None] - points[None, :]) ** 2


def monotone_coupling(wp, wq) -> list[tuple[int, int, float]]:
    """Quantile (north-west corner) coupling of two weight vectors.

    Returns the support cells ``(i, j, mass)`` in staircase order.
    """
    cp = np.cumsum(wp)
    cq = np.cumsum(wq)
    cp[-1] = cq[-1] = 1.0
    levels = np.union1d(np.clip(cp, 0.0, 1.0), np.clip(cq, 0.0, 1.0))
    cells = []
    prev = 0.0
    for lev in levels:
        mass = lev - prev
        if mass > 0.0:
            mid = prev + 0.5 * mass
            i = int(np.searchsorted(cp, mid))
            j = int(np.searchsorted(cq, mid))
            cells.append((min(i, len(wp) - 1), min(j, len(wq) - 1), float(mass)))
        prev = lev
    return cells


def half_cost(p: GridDistribution, q: GridDistribution) -> float:
    """Optimal transport cost for ``(a - b)^2 / 2``."""
    pts, (wp, wq) = _unpack(p, q)
    return float(sum(m * 0.5 * (pts[i] - pts[j]) ** 2 for i, j, m in monotone_coupling(wp, wq)))


def w2_squared(p: GridDistribution, q: GridDistribution) -> float:
    """Squared 2-Wasserstein distance (no 1/2 factor)."""
    return 2.0 * half_cost(p, q)


def w2(p: GridDistribution, q: GridDistribution) -> float:
    return float(np.sqrt(max(w2_squared(p, q), 0.0)))


def potentials(p: GridDistribution, q: GridDistribution) -> PotentialPair:
    """Optimal dual pair ``(phi, psi)`` for the half cost, defined on every grid point.

    Equalities ``phi_i + psi_j = c_ij`` are propagated along the monotone
    coupling, starting from ``phi = 0`` at its first cell. A component of the
    coupling that is disconnected from the previous ones starts from the
    largest feasible ``psi``. Atoms without mass get c-transform values.
    """
    pts, (wp, wq) = _unpack(p, q)
    if not (wp.any() and wq.any()):
        raise ValueError("both distributions need non-empty support")
    c = _cost(pts)
    n = len(pts)
    phi = np.full(n, np.nan)
    psi = np.full(n, np.nan)
    for i, j, _ in monotone_coupling(wp, wq):
        if np.isnan(phi[i]) and np.isnan(psi[j]):
            known = ~np.isnan(phi)
            psi[j] = np.min(c[known, j] - phi[known]) if known.any() else c[i, j]
            phi[i] = c[i, j] - psi[j]
        elif np.isnan(psi[j]):
            psi[j] = c[i, j] - phi[i]
        elif np.isnan(phi[i]):
            phi[i] = c[i, j] - psi[j]
    known_psi = ~np.isnan(psi)
    for i in np.flatnonzero(np.isnan(phi)):
        phi[i] = np.min(c[i, known_psi] - psi[known_psi])
    for j in np.flatnonzero(np.isnan(psi)):
        psi[j] = np.min(c[:, j] - phi)
    return PotentialPair(phi, psi)


def supporting_hyperplane_check(p: GridDistribution, q: GridDistribution, r: GridDistribution) -> float:
    """``half_cost(r, q) - half_cost(p, q) - <phi_{p->q}, r - p>``; never below zero."""
    _unpack(p, q, r)
    phi = potentials(p, q).phi
    return half_cost(r, q) - half_cost(p, q) - float(phi @ (r.weights - p.weights))


def discrete_entropy(p: GridDistribution) -> float:
    """Negative entropy ``sum p log p`` in nats, with ``0 log 0 = 0``."""
    w = p.weights[p.weights > 0]
    return float(np.sum(w * np.log(w)))


def kl(p: GridDistribution, q: GridDistribution) -> float:
    _unpack(p, q)
    sp = p.weights > 0
    if np.any(q.weights[sp] == 0):
        return float("inf")
    w = p.weights[sp]
    return float(np.sum(w * (np.log(w) - np.log(q.weights[sp]))))


def heat_step(p: GridDistribution, variance: float) -> GridDistribution:
    """Gaussian convolution on the grid; each atom's kernel is truncated and renormalized."""
    if variance < 0:
        raise ValueError(f"variance must be >= 0, got {variance}")
    if variance == 0:
        return GridDistribution(p.grid, p.weights)
    pts = p.grid.points
    k = np.exp(-((pts[:, None] - pts[None, :]) ** 2) / (2.0 * variance))
    k /= k.sum(axis=0, keepdims=True)
    out = k @ p.weights
    return GridDistribution(p.grid, out / out.sum())


def transport_step(p: GridDistribution, qvals, eta: float) -> GridDistribution:
    """Move every atom ``b`` to ``argmax_a Q(a) - (a - b)^2 / (2 eta)`` (ties: lowest index)."""
    qvals = np.asarray(qvals, dtype=np.float64)
    if qvals.shape != (p.grid.n,) or not np.all(np.isfinite(qvals)):
        raise ValueError("Q values must be finite and match the grid")
    if not eta > 0:
        raise ValueError(f"eta must be > 0, got {eta}")
    pts = p.grid.points
    score = qvals[:, None] - (pts[:, None] - pts[None, :]) ** 2 / (2.0 * eta)
    dest = np.argmax(score, axis=0)
    out = np.bincount(dest, weights=p.weights, minlength=p.grid.n)
    return GridDistribution(p.grid, out)
