"""Independent reference solvers shared by the unit and acceptance tests."""
from __future__ import annotations

import itertools
from functools import lru_cache

import numpy as np
from scipy.optimize import linprog


@lru_cache(maxsize=None)
def _spanning_tree_solvers(n: int):
    """Basic solutions of the n x n transportation polytope.

    Every vertex is supported on a spanning tree of the complete bipartite
    graph. For each tree the flows are a fixed linear map of the marginals,
    returned as a stacked matrix ``(trees, 2n-1, 2n)`` with the tree cells.
    """
    cells = [(i, j) for i in range(n) for j in range(n)]
    A = np.zeros((2 * n, n * n))
    for k, (i, j) in enumerate(cells):
        A[i, k] = 1.0
        A[n + j, k] = 1.0
    m = 2 * n - 1
    combos = np.array(list(itertools.combinations(range(n * n), m)))
    sub = A[:, combos].transpose(1, 0, 2)  # (trees, 2n, m)
    ranks = np.linalg.matrix_rank(sub)
    combos, sub = combos[ranks == m], sub[ranks == m]
    return combos, np.linalg.pinv(sub)


def brute_force_half_cost(points, wp, wq) -> float:
    """Minimum of the half cost over every vertex of the coupling polytope."""
    n = len(points)
    combos, pinv = _spanning_tree_solvers(n)
    flows = pinv @ np.concatenate([wp, wq])
    feasible = np.all(flows >= -1e-13, axis=1)
    c = 0.5 * (np.asarray(points)[:, None] - np.asarray(points)[None, :]) ** 2
    costs = np.sum(flows * c.ravel()[combos], axis=1)
    return float(np.min(costs[feasible]))


def lp_half_cost(points, wp, wq):
    """Primal optimum and dual marginals of the coupling LP (HiGHS)."""
    n = len(points)
    c = 0.5 * (np.asarray(points)[:, None] - np.asarray(points)[None, :]) ** 2
    A = np.zeros((2 * n, n * n))
    for i in range(n):
        A[i, i * n:(i + 1) * n] = 1.0
        A[n + i, i::n] = 1.0
    res = linprog(c.ravel(), A_eq=A, b_eq=np.concatenate([wp, wq]), bounds=(0, None), method="highs")
    return float(res.fun), res


def transport_argmax(points, qvals, eta):
    """Per-atom exhaustive argmax; ties go to the lowest index."""
    dest = []
    for b in points:
        best, arg = -np.inf, 0
        for k, a in enumerate(points):
            v = qvals[k] - (a - b) ** 2 / (2.0 * eta)
            if v > best:
                best, arg = v, k
        dest.append(arg)
    return np.array(dest)


def soft_values_fixed_point(P, r, pi, tau, gamma, iters=5000):
    """Iterates the soft Bellman evaluation map until it stops moving."""
    S, n = r.shape
    logs = np.where(pi > 0, np.log(np.where(pi > 0, pi, 1.0)), 0.0)
    negent = np.sum(pi * logs, axis=1)
    V = np.zeros(S)
    for _ in range(iters):
        Q = r + gamma * P @ V
        V_new = np.sum(pi * Q, axis=1) - tau * negent
        if np.max(np.abs(V_new - V)) < 1e-15:
            V = V_new
            break
        V = V_new
    return V, r + gamma * P @ V


def visitation_series(P, pi, rho, gamma, terms=2000):
    """Truncated ``(1 - gamma) sum_t gamma^t rho P_pi^t``."""
    P_pi = np.einsum("sa,sat->st", pi, P)
    d = np.zeros(len(rho))
    row = np.asarray(rho, dtype=np.float64)
    for t in range(terms):
        d += (1.0 - gamma) * gamma ** t * row
        row = row @ P_pi
    return d


def random_simplex(rng, n, zero_prob=0.0):
    w = rng.uniform(0.0, 1.0, n) ** 2
    if zero_prob > 0:
        w[rng.uniform(0.0, 1.0, n) < zero_prob] = 0.0
        if w.sum() == 0:
            w[rng.integers(n)] = 1.0
    return w / w.sum()
