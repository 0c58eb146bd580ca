"""Tabular checks of the Wasserstein proximal scheme on a gridded 1-D action space.

Policies are ``(S, n)`` arrays of per-state weights (or :class:`TabularPolicy`).
Entropy is the discrete one, used consistently in evaluation and in the
proximal objective.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field

import numpy as np

from . import ot1d
from .numeric import Rng, logsumexp
from .ot1d import ActionGrid, GridDistribution


@dataclass
class FiniteMdp:
    P: np.ndarray
    r: np.ndarray
    gamma: float
    rho: np.ndarray
    grid: ActionGrid

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.r = np.asarray(self.r, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        S, n, S2 = self.P.shape
        if S != S2 or self.r.shape != (S, n) or self.rho.shape != (S,) or n != self.grid.n:
            raise ValueError("inconsistent MDP shapes")
        if np.any(self.P < 0) or np.max(np.abs(self.P.sum(axis=2) - 1.0)) > 1e-12:
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(self.r)):
            raise ValueError("rewards must be finite")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("discount must lie in (0, 1)")
        if np.any(self.rho < 0) or abs(self.rho.sum() - 1.0) > 1e-12:
            raise ValueError("initial distribution must be a probability vector")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


class TabularPolicy:
    def __init__(self, grid: ActionGrid, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[1] != grid.n:
            raise ValueError("policy weights must have shape (S, n)")
        if np.any(w < 0) or np.max(np.abs(w.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("each policy row must be a probability vector")
        self.grid = grid
        self.weights = w / w.sum(axis=1, keepdims=True)

    @classmethod
    def uniform(cls, grid: ActionGrid, n_states: int) -> "TabularPolicy":
        return cls(grid, np.full((n_states, grid.n), 1.0 / grid.n))

    def row(self, s: int) -> GridDistribution:
        return GridDistribution(self.grid, self.weights[s])


@dataclass
class SoftValues:
    V: np.ndarray
    Q: np.ndarray


def _w(pi) -> np.ndarray:
    return pi.weights if isinstance(pi, TabularPolicy) else np.asarray(pi, dtype=np.float64)


def neg_entropy(pi) -> np.ndarray:
    """Per-state ``sum_a pi log pi`` with ``0 log 0 = 0``."""
    w = _w(pi)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(w > 0, w * np.log(w), 0.0)
    return t.sum(axis=1)


def _p_pi(mdp: FiniteMdp, w) -> np.ndarray:
    return np.einsum("sa,sat->st", w, mdp.P)


def evaluate_soft(mdp: FiniteMdp, pi, tau: float) -> SoftValues:
    """Exact entropy-regularized values by a direct linear solve."""
    w = _w(pi)
    rhs = (w * mdp.r).sum(axis=1) - tau * neg_entropy(w)
    A = np.eye(mdp.n_states) - mdp.gamma * _p_pi(mdp, w)
    if not np.isfinite(np.linalg.cond(A)) or np.linalg.cond(A) > 1e14:
        raise np.linalg.LinAlgError("policy evaluation system is singular")
    V = np.linalg.solve(A, rhs)
    Q = mdp.r + mdp.gamma * mdp.P @ V
    return SoftValues(V, Q)


def discounted_visitation(mdp: FiniteMdp, pi, rho=None) -> np.ndarray:
    """``(1 - gamma) * sum_t gamma^t P(s_t = s)`` started from ``rho`` (default ``mdp.rho``)."""
    rho = mdp.rho if rho is None else np.asarray(rho, dtype=np.float64)
    A = np.eye(mdp.n_states) - mdp.gamma * _p_pi(mdp, _w(pi)).T
    return (1.0 - mdp.gamma) * np.linalg.solve(A, rho)


def stationary_distribution(mdp: FiniteMdp, pi) -> np.ndarray:
    """Invariant distribution of the state chain under ``pi`` (least-squares solve)."""
    S = mdp.n_states
    A = np.vstack([_p_pi(mdp, _w(pi)).T - np.eye(S), np.ones((1, S))])
    b = np.zeros(S + 1)
    b[-1] = 1.0
    d = np.linalg.lstsq(A, b, rcond=None)[0]
    d = np.clip(d, 0.0, None)
    return d / d.sum()


def perf_diff_sides(mdp: FiniteMdp, pi, pi2, tau: float):
    """Both sides of the regularized performance-difference identity, per start state.

    ``V'(s) - V(s) = E_{s'~d'_s}[<Q(s',.), pi'(.|s') - pi(.|s')> - tau H'(s') + tau H(s')] / (1 - gamma)``
    where ``Q, V, H`` belong to ``pi`` and primes to ``pi2``.
    """
    w, w2 = _w(pi), _w(pi2)
    base = evaluate_soft(mdp, w, tau)
    new = evaluate_soft(mdp, w2, tau)
    integrand = ((w2 - w) * base.Q).sum(axis=1) - tau * neg_entropy(w2) + tau * neg_entropy(w)
    lhs = new.V - base.V
    rhs = np.empty(mdp.n_states)
    for s in range(mdp.n_states):
        d = discounted_visitation(mdp, w2, np.eye(mdp.n_states)[s])
        rhs[s] = d @ integrand / (1.0 - mdp.gamma)
    return lhs, rhs


def perf_diff_check(mdp: FiniteMdp, pi, pi2, tau: float) -> float:
    lhs, rhs = perf_diff_sides(mdp, pi, pi2, tau)
    return float(np.max(np.abs(lhs - rhs)))


def lemma3_residual(mdp: FiniteMdp, pi, pi_star, tau: float, nu) -> float:
    """``|E_nu[<Q^pi, pi* - pi> - tau H* + tau H] - (1 - gamma) E_nu[V* - V]|``.

    Vanishes when ``nu`` is invariant for the chain driven by ``pi_star``.
    """
    w, ws = _w(pi), _w(pi_star)
    base = evaluate_soft(mdp, w, tau)
    star = evaluate_soft(mdp, ws, tau)
    left = ((ws - w) * base.Q).sum(axis=1) - tau * neg_entropy(ws) + tau * neg_entropy(w)
    right = (1.0 - mdp.gamma) * (star.V - base.V)
    return float(abs(np.asarray(nu) @ (left - right)))


def soft_greedy(Q: np.ndarray, tau: float) -> np.ndarray:
    z = Q / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def optimal_soft_policy(mdp: FiniteMdp, tau: float, tol: float = 1e-12, max_iter: int = 1_000_000):
    """Soft value iteration ``V <- tau * logsumexp(Q / tau)``; returns ``(pi*, values of pi*)``."""
    if not tau > 0:
        raise ValueError("tau must be > 0")
    g = mdp.gamma
    V = np.zeros(mdp.n_states)
    thresh = tol * (1.0 - g) / g
    for _ in range(max_iter):
        Q = mdp.r + g * mdp.P @ V
        V_new = tau * logsumexp(Q / tau, axis=1)
        done = np.max(np.abs(V_new - V)) < thresh
        V = V_new
        if done:
            break
    else:
        raise RuntimeError("soft value iteration did not converge")
    pi = soft_greedy(mdp.r + g * mdp.P @ V, tau)
    return TabularPolicy(mdp.grid, pi), evaluate_soft(mdp, pi, tau)


# --- per-state proximal step -------------------------------------------------

@dataclass
class ProxResult:
    dist: GridDistribution
    residual: float
    converged: bool
    iterations: int
    objective: float


def prox_objective(qvals, q: GridDistribution, pi_k: GridDistribution, tau: float, eta: float) -> float:
    """``<Q, q> - tau sum q log q - W2^2(q, pi_k) / (2 eta)``."""
    return float(np.asarray(qvals) @ q.weights - tau * ot1d.discrete_entropy(q)
                 - ot1d.w2_squared(q, pi_k) / (2.0 * eta))


class _Shooter:
    """Solves the proximal step through its cumulative-mass optimality conditions.

    With ``C_i`` the cumulative mass of the answer, stationarity reads
    ``log(q_{i+1} / q_i) = base_i + kappa * m_i`` where ``m_i`` is the source
    atom transported across cut ``i`` (any value between two adjacent source
    atoms when ``C_i`` sits exactly on a source cumulative level). Given
    ``q_0`` the recursion runs left to right and the total mass is increasing
    in ``q_0``, so bisection finds it; a cut pinned to a source level splits
    the chain into independent segments. Each segment measures mass as an
    excess over its pinned level so that tiny atoms next to a level are
    resolved exactly.
    """

    def __init__(self, qvals, pi_k: GridDistribution, tau: float, eta: float):
        pts = pi_k.grid.points
        self.n = pts.shape[0]
        dx = pi_k.grid.spacing
        self.kappa = dx / (eta * tau)
        mid = 0.5 * (pts[:-1] + pts[1:])
        self.base = (np.diff(qvals) - dx * mid / eta) / tau
        mask = pi_k.weights > 0
        self.src = pts[mask]
        self.w = pi_k.weights[mask] / pi_k.weights[mask].sum()
        self.cum = np.cumsum(self.w)
        self._base = self.base.tolist()
        self._src = self.src.tolist()
        self._cache: dict[int, list] = {}

    def _levels(self, kb: int) -> np.ndarray:
        """Cumulative source levels above level ``kb`` (``kb = -1`` is zero mass)."""
        return np.cumsum(self.w[kb + 1:])

    def _level_list(self, kb: int) -> list:
        if kb not in self._cache:
            self._cache[kb] = self._levels(kb).tolist()
        return self._cache[kb]

    def _run(self, i0: int, kb: int, lnq0: float):
        rel = self._level_list(kb)
        top = len(rel) - 1
        base, kappa, src = self._base, self.kappa, self._src
        lnq = [lnq0]
        ks = []
        e = math.exp(min(lnq0, 700.0))
        es = [e]
        cur = lnq0
        for i in range(i0, self.n - 1):
            k = kb + 1 + min(bisect.bisect_left(rel, e), top)
            ks.append(k)
            cur = cur + base[i] + kappa * src[k]
            lnq.append(cur)
            e += math.exp(min(cur, 700.0))
            es.append(e)
        return np.array(lnq), np.array(es), np.array(ks, dtype=np.int64), rel[-1]

    def _gap(self, i0: int, kb: int, lnq0: float) -> float:
        rel = self._level_list(kb)
        top = len(rel) - 1
        base, kappa, src = self._base, self.kappa, self._src
        e = math.exp(min(lnq0, 700.0))
        cur = lnq0
        for i in range(i0, self.n - 1):
            k = kb + 1 + min(bisect.bisect_left(rel, e), top)
            cur = cur + base[i] + kappa * src[k]
            e += math.exp(min(cur, 700.0))
        return e - rel[-1]

    def segment(self, i0: int, kb: int, lo: float, hi: float) -> np.ndarray:
        if i0 == self.n - 1:
            return np.array([math.log(max(self._levels(kb)[-1], 1e-300))])
        for _ in range(2000):
            mid = 0.5 * (lo + hi)
            if not lo < mid < hi:
                break
            if self._gap(i0, kb, mid) > 0.0:
                hi = mid
            else:
                lo = mid
        lnq_lo, es_lo, ks_lo, target = self._run(i0, kb, lo)
        lnq_hi, es_hi, ks_hi, _ = self._run(i0, kb, hi)
        diff = np.flatnonzero(ks_lo != ks_hi)
        if diff.size == 0 or abs(es_hi[-1] - target) <= 1e-13 or abs(es_lo[-1] - target) <= 1e-13:
            return lnq_hi if abs(es_hi[-1] - target) < abs(es_lo[-1] - target) else lnq_lo
        first = int(diff[0])
        k_lo, k_hi = int(ks_lo[first]), int(ks_hi[first])
        level = float(self._levels(kb)[k_lo - kb - 1])
        # Every cut whose mass rounds onto the level is a candidate for the pin; the
        # bisection only resolves log-mass to one ulp of the shooting variable.
        tol = 1e-12 + 16.0 * float(np.spacing(max(abs(lo), abs(hi))))
        cut = first
        chosen = None
        while cut < self.n - 1 - i0 and abs(es_lo[cut] - level) <= tol:
            step = lnq_lo[cut] + self.base[i0 + cut]
            lo_t = step + self.kappa * self.src[k_lo]
            hi_t = step + self.kappa * self.src[k_hi]
            chosen = (cut, lo_t, hi_t)
            if self._gap(i0 + cut + 1, k_lo, lo_t) <= 0.0:
                break
            cut += 1
        if chosen is None:
            return lnq_lo
        cut, lo_t, hi_t = chosen
        tail = self.segment(i0 + cut + 1, k_lo, lo_t, hi_t)
        return np.concatenate([lnq_lo[:cut + 1], tail])

    def solve(self) -> np.ndarray:
        """Log-weights of the solution (normalized)."""
        spread = float(np.sum(np.abs(self.base)) + self.kappa * np.max(np.abs(self.src)) * self.n)
        lnq = self.segment(0, -1, -spread - 800.0, 0.0)
        return lnq - logsumexp(lnq)

    def residual(self, lnq: np.ndarray, rtol: float = 1e-8) -> float:
        """Largest violation of the cut conditions, in log-ratio units.

        Masses are compared from whichever end of the chain keeps them precise.
        """
        q = np.exp(lnq)
        C = np.cumsum(q)
        T = np.cumsum(q[::-1])[::-1][1:]
        U = np.cumsum(self.w[::-1])[::-1][1:]
        top = len(self.cum) - 1
        worst = 0.0
        for i in range(self.n - 1):
            lr = lnq[i + 1] - lnq[i] - self.base[i]
            if C[i] <= 0.5:
                dist = np.abs(self.cum[:top] - C[i])
                scale = C[i]
            else:
                dist = np.abs(U - T[i])
                scale = T[i]
            j = int(np.argmin(dist)) if top > 0 else -1
            if j >= 0 and dist[j] <= rtol * scale + 1e-300:
                v = max(self.kappa * self.src[j] - lr, lr - self.kappa * self.src[j + 1], 0.0)
            else:
                k = int(np.sum(self.cum[:top] < C[i])) if C[i] <= 0.5 else int(np.sum(U > T[i]))
                v = abs(lr - self.kappa * self.src[k])
            worst = max(worst, v)
        return worst


def _shoot(qvals, pi_k: GridDistribution, tau: float, eta: float):
    """Left-to-right shoot spliced with the mirrored shoot.

    Forward shooting resolves tiny masses near zero cumulative mass but not near
    one, so rows past the median come from the reflected problem.
    """
    sh = _Shooter(qvals, pi_k, tau, eta)
    left = sh.solve()
    cands = [left]
    pts = pi_k.grid.points
    if np.allclose(pts[::-1], pts[0] + pts[-1] - pts, rtol=0.0, atol=1e-12):
        mirrored = GridDistribution(pi_k.grid, pi_k.weights[::-1])
        right = _Shooter(qvals[::-1], mirrored, tau, eta).solve()[::-1]
        before = np.cumsum(np.exp(left)) - np.exp(left)
        spliced = np.where(before <= 0.5, left, right)
        cands += [spliced - logsumexp(spliced), right]
    scored = [(sh.residual(c), i, c) for i, c in enumerate(cands)]
    res, _, best = min(scored, key=lambda t: (t[0], t[1]))
    return best, res


def _mirror_prox(qvals, pi_k: GridDistribution, tau: float, eta: float, tol: float, max_iter: int):
    grid = pi_k.grid
    q = 0.999 * pi_k.weights + 0.001 / grid.n
    best, best_obj, res = q, -np.inf, np.inf
    it = 0
    for it in range(1, max_iter + 1):
        dist = GridDistribution(grid, q)
        phi = ot1d.potentials(dist, pi_k).phi
        phi = phi - phi @ q
        g = qvals - tau * (1.0 + np.log(q)) - phi / eta
        res = float(np.max(np.abs(g - g @ q)))
        obj = prox_objective(qvals, dist, pi_k, tau, eta)
        if obj > best_obj:
            best, best_obj = q, obj
        if res < tol:
            break
        step = 0.5 / (np.max(np.abs(g)) + 1e-12)
        z = np.log(q) + step * g
        q = np.exp(z - z.max())
        q /= q.sum()
    return best, res, it


def exact_prox_step(qvals, pi_k: GridDistribution, tau: float, eta: float, method: str = "shooting",
                    tol: float = 1e-6, max_iter: int = 50_000) -> ProxResult:
    """``argmax_q <Q, q> - tau sum q log q - W2^2(q, pi_k) / (2 eta)`` over the simplex.

    ``method="shooting"`` solves the optimality conditions exactly (residual in
    units of Q). ``method="mirror"`` runs entropic mirror ascent with
    Kantorovich-potential supergradients and reports its stationarity residual.
    """
    if not (tau > 0 and eta > 0):
        raise ValueError("tau and eta must be > 0")
    qvals = np.asarray(qvals, dtype=np.float64)
    if qvals.shape != (pi_k.grid.n,) or not np.all(np.isfinite(qvals)):
        raise ValueError("Q values must be finite and match the grid")
    if method == "shooting":
        lnq, res = _shoot(qvals, pi_k, tau, eta)
        q = np.exp(lnq)
        res = tau * res
        it = 1
    elif method == "mirror":
        q, res, it = _mirror_prox(qvals, pi_k, tau, eta, tol, max_iter)
    else:
        raise ValueError(f"unknown method {method!r}")
    dist = GridDistribution(pi_k.grid, q)
    return ProxResult(dist, float(res), bool(res < tol), it, prox_objective(qvals, dist, pi_k, tau, eta))


def split_step(qvals, pi_k: GridDistribution, tau: float, eta: float) -> GridDistribution:
    """Transport step towards high Q, then Gaussian smoothing with variance ``2 tau eta``."""
    return ot1d.heat_step(ot1d.transport_step(pi_k, qvals, eta), 2.0 * tau * eta)


# --- iterating the scheme ----------------------------------------------------

@dataclass
class Trajectory:
    policies: list = field(default_factory=list)
    values: list = field(default_factory=list)
    J: list = field(default_factory=list)
    D: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    min_weight: list = field(default_factory=list)
    J_star: float = float("nan")
    nu: np.ndarray | None = None

    def records(self) -> list[dict]:
        out = []
        for k in range(len(self.J)):
            out.append({
                "k": k,
                "J": float(self.J[k]),
                "D": float(self.D[k]),
                "J_gap": float(self.J_star - self.J[k]),
                "residuals": [float(x) for x in self.residuals[k]],
                "min_weight": float(self.min_weight[k]),
                "V": [float(x) for x in self.values[k]],
            })
        return out


def wppg_iterate(mdp: FiniteMdp, pi0, tau: float, eta: float, steps: int, mode: str = "exact",
                 nu: str | np.ndarray = "visitation", star=None) -> Trajectory:
    """Apply the per-state step to every state ``steps`` times with exact soft Q values.

    ``nu`` weights the tracked objective ``J`` and distance ``D``: the
    discounted visitation of the optimal policy from ``mdp.rho``
    (``"visitation"``), its stationary law (``"stationary"``) or an explicit vector.
    """
    if mode not in ("exact", "split"):
        raise ValueError(f"mode must be 'exact' or 'split', got {mode!r}")
    w = _w(pi0).copy()
    if np.any(w <= 0):
        raise ValueError("initial policy needs full support")
    pi_star, vals_star = star if star is not None else optimal_soft_policy(mdp, tau)
    if isinstance(nu, str):
        if nu == "visitation":
            nu = discounted_visitation(mdp, pi_star)
        elif nu == "stationary":
            nu = stationary_distribution(mdp, pi_star)
        else:
            raise ValueError(f"unknown weighting {nu!r}")
    nu = np.asarray(nu, dtype=np.float64)
    traj = Trajectory(J_star=float(nu @ vals_star.V), nu=nu)
    S = mdp.n_states
    residuals = [0.0] * S
    for k in range(steps + 1):
        vals = evaluate_soft(mdp, w, tau)
        traj.policies.append(w.copy())
        traj.values.append(vals.V.copy())
        traj.J.append(float(nu @ vals.V))
        traj.D.append(float(sum(nu[s] * ot1d.half_cost(GridDistribution(mdp.grid, w[s]), pi_star.row(s))
                                for s in range(S))))
        traj.residuals.append(list(residuals))
        traj.min_weight.append(float(w.min()))
        if k == steps:
            break
        new = np.empty_like(w)
        for s in range(S):
            row = GridDistribution(mdp.grid, w[s])
            if mode == "exact":
                res = exact_prox_step(vals.Q[s], row, tau, eta)
                new[s] = res.dist.weights
                residuals[s] = res.residual
            else:
                new[s] = split_step(vals.Q[s], row, tau, eta).weights
                residuals[s] = 0.0
        w = new
    return traj


@dataclass
class ContractionFit:
    ratio: float
    worst_step: float
    lam: float
    n_points: int
    floor: float


def fit_contraction(J_gap, D, tau: float, lambdas=None, abs_floor: float = 1e-11,
                    plateau_factor: float = 2.0) -> ContractionFit:
    """Fit ``e_k = J_gap_k + lam * tau * D_k ~ C * ratio^k``.

    On a grid the iteration stops at a fixed point a little short of the
    optimum, so the fit window ends once ``e_k`` drops to
    ``max(abs_floor, plateau_factor * e_K)`` where ``e_K`` is the last value.
    ``lam`` is chosen from ``lambdas`` to minimize the worst one-step ratio
    ``e_{k+1} / e_k`` inside the window (the tightest uniform contraction);
    ``ratio`` is the least-squares slope of ``log e_k`` at that ``lam``.
    """
    J_gap = np.asarray(J_gap, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    if J_gap.shape != D.shape or J_gap.ndim != 1:
        raise ValueError("J_gap and D must be 1-D arrays of equal length")
    if lambdas is None:
        lambdas = np.concatenate([[0.0], np.logspace(-3, 4, 71)])
    best = None
    for lam in lambdas:
        e = J_gap + lam * tau * D
        floor = max(abs_floor, plateau_factor * float(e[-1]))
        idx = np.flatnonzero(e <= floor)
        m = int(idx[0]) if idx.size else len(e)
        if m < 3:
            continue
        worst = float(np.max(e[1:m] / e[:m - 1]))
        if best is None or worst < best[0]:
            k = np.arange(m)
            slope = np.polyfit(k, np.log(e[:m]), 1)[0]
            best = (worst, ContractionFit(math.exp(slope), worst, float(lam), m, floor))
    if best is None:
        raise ValueError("fewer than 3 iterations above the floor; cannot fit a rate")
    return best[1]


# --- builtin problems ---------------------------------------------------------

def random_mdp(n_states: int, n_actions: int, gamma: float, rng: Rng, grid: ActionGrid | None = None) -> FiniteMdp:
    """Random MDP whose rewards and transitions vary smoothly with the action."""
    grid = ActionGrid.uniform(n_actions) if grid is None else grid
    a = grid.points
    centers = rng.uniform(-0.8, 0.8, n_states)
    scale = rng.uniform(0.5, 2.0, n_states)
    r = 1.0 - scale[:, None] * (a[None, :] - centers[:, None]) ** 2
    slope = rng.normal((n_states, n_states))
    icpt = rng.normal((n_states, n_states))
    logits = slope[:, None, :] * a[None, :, None] * 2.0 + icpt[:, None, :]
    logits -= logits.max(axis=2, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=2, keepdims=True)
    rho = np.full(n_states, 1.0 / n_states)
    return FiniteMdp(P, r, gamma, rho, grid)


BUILTIN_MDPS = {"builtin3": (3, 21, 0.9, 3)}


def builtin_mdp(name: str = "builtin3") -> FiniteMdp:
    try:
        S, n, gamma, seed = BUILTIN_MDPS[name]
    except KeyError:
        raise ValueError(f"unknown builtin MDP {name!r}; choose from {sorted(BUILTIN_MDPS)}") from None
    return random_mdp(S, n, gamma, Rng(seed, ("mdp", name)))
