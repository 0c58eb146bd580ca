"""Central finite-difference checks of every analytic gradient in the package."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .agent import CriticPair, critic_loss_grad, min_q_action_grad
from .nn import MlpNet
from .numeric import Rng
from .policy import ActionBox, ExplicitActor, ImplicitActor

H = 1e-5


@dataclass
class SuiteResult:
    name: str
    instances: int
    max_rel_error: float


def rel_error(analytic, numeric) -> float:
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def fd_grad(f, x, coords=None, h: float = H) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (a flat array, restored afterwards)."""
    coords = range(x.size) if coords is None else coords
    out = np.zeros(x.size)
    for i in coords:
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        out[i] = (fp - fm) / (2.0 * h)
    return out


def _coords(n: int, rng: Rng, limit: int = 400):
    if n <= limit:
        return np.arange(n)
    return np.sort(rng.integers(n, size=limit))


def _away_from_kinks(net: MlpNet, x, margin: float = 1e-3) -> bool:
    """ReLU nets are only differentiable away from zero pre-activations."""
    if net.activation != "relu":
        return True
    h = np.atleast_2d(x)
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = h @ w.T + b
        if np.min(np.abs(z)) < margin:
            return False
        h = np.maximum(z, 0.0)
    return True


NET_ARCHS = [
    ((3, 8, 6, 2), "tanh"),
    ((4, 7, 1), "relu"),
    ((2, 5, 5, 5, 3), "identity"),
    ((5, 64, 64, 2), "tanh"),
]


def net_suite(rng: Rng, instances: int = 10) -> list[SuiteResult]:
    out = []
    for widths, act in NET_ARCHS:
        worst = 0.0
        n_done = 0
        arch_rng = rng.child(f"net{widths}{act}")
        while n_done < instances:
            r = arch_rng.child(f"i{n_done}-{worst!r}")
            net = MlpNet(widths, act, r.child("init"))
            net.params += 0.1 * r.normal(net.n_params)
            x = r.normal((4, widths[0]))
            if not _away_from_kinks(net, x):
                continue
            up = r.normal((4, widths[-1]))
            net.forward(x)
            gp, gx = net.backward(up)

            def f():
                return float(np.sum(up * net.forward(x)))

            coords = _coords(net.n_params, r.child("coords"))
            num_p = fd_grad(f, net.params, coords)
            worst = max(worst, rel_error(gp[coords], num_p[coords]))
            flat = x.reshape(-1)
            num_x = fd_grad(f, flat)
            worst = max(worst, rel_error(gx, num_x.reshape(x.shape)))
            n_done += 1
        out.append(SuiteResult(f"mlp{widths}-{act}", instances, worst))
    return out


def _box(d: int) -> ActionBox:
    return ActionBox(-np.linspace(1.0, 2.0, d), np.linspace(1.5, 2.5, d))


def explicit_suite(rng: Rng, instances: int = 10) -> SuiteResult:
    worst = 0.0
    for i in range(instances):
        r = rng.child(f"explicit{i}")
        S, A = 3, 2
        actor = ExplicitActor(S, _box(A), hidden=(8, 8), rng=r.child("init"), log_std_bounds=(-3.0, 1.0))
        s = r.normal((5, S))
        eps = r.normal((5, A))
        up = r.normal((5, A))
        actor.action(s, eps)
        gp, gs = actor.backward(up, need_state=True)

        def f():
            return float(np.sum(up * actor.action(s, eps)))

        worst = max(worst, rel_error(gp, fd_grad(f, actor.net.params)))
        worst = max(worst, rel_error(gs, fd_grad(f, s.reshape(-1)).reshape(s.shape)))
    return SuiteResult("explicit-actor", instances, worst)


def implicit_suite(rng: Rng, instances: int = 10) -> SuiteResult:
    worst = 0.0
    for i in range(instances):
        r = rng.child(f"implicit{i}")
        S, A = 4, 2
        actor = ImplicitActor(S, _box(A), hidden=(8, 8), rng=r.child("init"))
        s = r.normal((5, S))
        z = r.normal((5, actor.latent_dim))
        up = r.normal((5, A))
        actor.action(s, z)
        gp, gs = actor.backward(up, need_state=True)

        def f():
            return float(np.sum(up * actor.action(s, z)))

        worst = max(worst, rel_error(gp, fd_grad(f, actor.net.params)))
        worst = max(worst, rel_error(gs, fd_grad(f, s.reshape(-1)).reshape(s.shape)))
    return SuiteResult("implicit-actor", instances, worst)


def critic_suite(rng: Rng, instances: int = 10) -> list[SuiteResult]:
    loss_worst, act_worst = 0.0, 0.0
    for i in range(instances):
        r = rng.child(f"critic{i}")
        S, A = 3, 2
        pair = CriticPair.create(S, A, (8, 8), "tanh", r.child("init"))
        s = r.normal((6, S))
        a = r.normal((6, A))
        y = r.normal(6)
        _, g = critic_loss_grad(pair.q1, s, a, y)

        def loss():
            return critic_loss_grad(pair.q1, s, a, y)[0]

        loss_worst = max(loss_worst, rel_error(g, fd_grad(loss, pair.q1.params)))
        G = min_q_action_grad(pair, s, a)
        for row in range(s.shape[0]):
            ar = a[row].copy()

            def qmin():
                x = np.hstack([s[row], ar])[None, :]
                return float(min(pair.q1.forward(x)[0, 0], pair.q2.forward(x)[0, 0]))

            x = np.hstack([s[row], ar])[None, :]
            if abs(pair.q1.forward(x)[0, 0] - pair.q2.forward(x)[0, 0]) < 1e-4:
                continue  # the min is not differentiable at a tie
            act_worst = max(act_worst, rel_error(G[row], fd_grad(qmin, ar)))
    return [SuiteResult("critic-loss", instances, loss_worst),
            SuiteResult("min-critic-action-grad", instances, act_worst)]


def run_all(seed: int, instances: int = 10) -> list[SuiteResult]:
    rng = Rng(seed, ("gradcheck",))
    results = net_suite(rng.child("net"), instances)
    results.append(explicit_suite(rng.child("explicit"), instances))
    results.append(implicit_suite(rng.child("implicit"), instances))
    results.extend(critic_suite(rng.child("critic"), instances))
    return results
