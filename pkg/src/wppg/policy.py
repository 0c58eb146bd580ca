"""Tanh-squashed actors: an explicit Gaussian head and a noise-conditioned generator."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .nn import MlpNet
from .numeric import Rng

# keeps emitted actions strictly inside the open box even when tanh saturates
_TANH_LIMIT = 1.0 - 1e-12


@dataclass(frozen=True)
class ActionBox:
    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.atleast_1d(np.asarray(self.low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(self.high, dtype=np.float64))
        if low.shape != high.shape or low.ndim != 1:
            raise ValueError("box bounds must be 1-D arrays of equal length")
        if not np.all(low < high):
            raise ValueError(f"need low < high componentwise, got {low} and {high}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    @property
    def dim(self) -> int:
        return self.low.shape[0]

    @property
    def scale(self) -> np.ndarray:
        return (self.high - self.low) / 2.0

    @property
    def mid(self) -> np.ndarray:
        return (self.high + self.low) / 2.0

    def clip(self, a) -> np.ndarray:
        return np.clip(a, self.low, self.high)

    def contains(self, a, closed: bool = False) -> bool:
        a = np.asarray(a)
        if closed:
            return bool(np.all((a >= self.low) & (a <= self.high)))
        return bool(np.all((a > self.low) & (a < self.high)))


def squash(u, box: ActionBox) -> np.ndarray:
    """Affine-tanh map of pre-activations onto the action box."""
    t = np.clip(np.tanh(u), -_TANH_LIMIT, _TANH_LIMIT)
    return box.scale * t + box.mid


def _rows(x, width: int, name: str):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = x[None, :] if single else x
    if x2.ndim != 2 or x2.shape[1] != width:
        raise ValueError(f"{name} must have width {width}, got shape {x.shape}")
    return x2, single


class ExplicitActor:
    """Tanh-Gaussian policy: ``a = squash(mu(s) + sigma(s) * eps)``.

    The network outputs ``(mu, log sigma)``; ``log sigma`` is hard-clamped
    to ``log_std_bounds``.
    """

    kind = "explicit"

    def __init__(self, state_dim: int, box: ActionBox, hidden=(64, 64), activation: str = "tanh",
                 rng: Rng | None = None, log_std_bounds=(-10.0, 4.0), net: MlpNet | None = None):
        self.state_dim = int(state_dim)
        self.box = box
        self.action_dim = box.dim
        self.log_std_bounds = (float(log_std_bounds[0]), float(log_std_bounds[1]))
        widths = (self.state_dim, *hidden, 2 * self.action_dim)
        self.net = net if net is not None else MlpNet(widths, activation, rng)
        if self.net.widths[0] != self.state_dim or self.net.widths[-1] != 2 * self.action_dim:
            raise ValueError("network widths do not match the actor dimensions")
        self._cache = None

    @property
    def noise_dim(self) -> int:
        return self.action_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def copy(self) -> "ExplicitActor":
        return ExplicitActor(self.state_dim, self.box, log_std_bounds=self.log_std_bounds, net=self.net.copy())

    def heads(self, s):
        s2, single = _rows(s, self.state_dim, "state")
        out = self.net.forward(s2)
        mu = out[:, :self.action_dim]
        raw = out[:, self.action_dim:]
        log_std = np.clip(raw, *self.log_std_bounds)
        if single:
            return mu[0], log_std[0]
        return mu, log_std

    def action(self, s, eps) -> np.ndarray:
        """Deterministic map from (state, noise) to action; caches for ``backward``."""
        s2, single = _rows(s, self.state_dim, "state")
        eps2, _ = _rows(eps, self.action_dim, "noise")
        if eps2.shape[0] != s2.shape[0]:
            raise ValueError("state and noise batches differ in length")
        out = self.net.forward(s2)
        mu = out[:, :self.action_dim]
        raw = out[:, self.action_dim:]
        lo, hi = self.log_std_bounds
        log_std = np.clip(raw, lo, hi)
        std = np.exp(log_std)
        pre = mu + std * eps2
        t = np.tanh(pre)
        a = self.box.scale * np.clip(t, -_TANH_LIMIT, _TANH_LIMIT) + self.box.mid
        self._cache = (single, eps2, std, t, (raw > lo) & (raw < hi), pre)
        return a[0] if single else a

    @property
    def last_pre_squash(self) -> np.ndarray:
        single, _, _, _, _, pre = self._cache
        return pre[0] if single else pre

    def backward(self, upstream, need_state: bool = False):
        """Gradient of ``sum(upstream * action)`` w.r.t. parameters (and optionally state)."""
        if self._cache is None:
            raise RuntimeError("backward called before action")
        single, eps, std, t, free, _ = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        dpre = g * self.box.scale * (1.0 - t * t)
        dlog = dpre * eps * std * free
        gp, gs = self.net.backward(np.hstack([dpre, dlog]), need_params=True, need_input=need_state)
        if need_state:
            return gp, (gs[0] if single else gs)
        return gp

    def sample(self, s, rng: Rng):
        s2, single = _rows(s, self.state_dim, "state")
        eps = rng.normal((s2.shape[0], self.action_dim))
        a = self.action(s2, eps)
        if single:
            return a[0], eps[0]
        return a, eps

    def mean_action(self, s) -> np.ndarray:
        mu, _ = self.heads(s)
        return squash(mu, self.box)


class ImplicitActor:
    """Noise-conditioned generator ``a = squash(f([s, z]))`` with ``z ~ N(0, I)``."""

    kind = "implicit"

    def __init__(self, state_dim: int, box: ActionBox, latent_dim: int | None = None, hidden=(64, 64),
                 activation: str = "tanh", rng: Rng | None = None, net: MlpNet | None = None):
        self.state_dim = int(state_dim)
        self.box = box
        self.action_dim = box.dim
        self.latent_dim = default_latent_dim(state_dim) if latent_dim is None else int(latent_dim)
        if self.latent_dim < 0:
            raise ValueError("latent dimension must be >= 0")
        widths = (self.state_dim + self.latent_dim, *hidden, self.action_dim)
        self.net = net if net is not None else MlpNet(widths, activation, rng)
        if self.net.widths[0] != self.state_dim + self.latent_dim or self.net.widths[-1] != self.action_dim:
            raise ValueError("network widths do not match the actor dimensions")
        self._cache = None

    @property
    def noise_dim(self) -> int:
        return self.latent_dim

    @property
    def params(self) -> np.ndarray:
        return self.net.params

    def copy(self) -> "ImplicitActor":
        return ImplicitActor(self.state_dim, self.box, self.latent_dim, net=self.net.copy())

    def action(self, s, z) -> np.ndarray:
        s2, single = _rows(s, self.state_dim, "state")
        z2 = np.asarray(z, dtype=np.float64).reshape(s2.shape[0], self.latent_dim)
        u = self.net.forward(np.hstack([s2, z2]))
        t = np.tanh(u)
        a = self.box.scale * np.clip(t, -_TANH_LIMIT, _TANH_LIMIT) + self.box.mid
        self._cache = (single, t)
        return a[0] if single else a

    def backward(self, upstream, need_state: bool = False):
        if self._cache is None:
            raise RuntimeError("backward called before action")
        single, t = self._cache
        g = np.asarray(upstream, dtype=np.float64)
        if single:
            g = g[None, :]
        du = g * self.box.scale * (1.0 - t * t)
        gp, gx = self.net.backward(du, need_params=True, need_input=need_state)
        if need_state:
            gs = gx[:, :self.state_dim]
            return gp, (gs[0] if single else gs)
        return gp

    def sample(self, s, rng: Rng):
        s2, single = _rows(s, self.state_dim, "state")
        z = rng.normal((s2.shape[0], self.latent_dim))
        a = self.action(s2, z)
        if single:
            return a[0], z[0]
        return a, z


def default_latent_dim(state_dim: int) -> int:
    return math.ceil(state_dim / 3)


def sample_explicit(actor: ExplicitActor, s, rng: Rng):
    """Returns ``(action, pre_squash, eps)``."""
    a, eps = actor.sample(s, rng)
    return a, actor.last_pre_squash, eps


def sample_implicit(actor: ImplicitActor, s, rng: Rng):
    """Returns ``(action, z)``."""
    return actor.sample(s, rng)


def reforward_delta(actor, s, noise, a_before) -> np.ndarray:
    """Action increment under identical noise after the actor parameters moved."""
    return actor.action(s, noise) - np.asarray(a_before, dtype=np.float64)
