"""Plug-in mixture entropy of a Gaussian-smoothed sampler.

The smoothed policy density at a state is approximated by an equal-weight
Gaussian mixture centred on generator samples; the entropy is the average
negative log of that mixture at independent smoothed samples.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numeric import Rng, logsumexp


@dataclass(frozen=True)
class EntropyConfig:
    sigma: float = 0.1
    M: int = 32
    L: int = 32

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.M < 1 or self.L < 1:
            raise ValueError("M and L must be >= 1")


def kernel_logpdf(x, sigma: float, d_a: int | None = None) -> np.ndarray:
    """Log-density of the isotropic ``N(0, sigma^2 I)`` kernel; rows of ``x`` are points."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    if d_a is None:
        d_a = x.shape[-1] if x.ndim else 1
    sq = np.sum(x * x, axis=-1) if x.ndim else x * x
    return -0.5 * d_a * math.log(2.0 * math.pi * sigma * sigma) - sq / (2.0 * sigma * sigma)


def plugin_entropy(centers, baselines, sigma: float) -> float:
    """``-(1/L) sum_l log((1/M) sum_j phi(a_l - mu_j))`` evaluated with log-sum-exp."""
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    baselines = np.atleast_2d(np.asarray(baselines, dtype=np.float64))
    diff = baselines[:, None, :] - centers[None, :, :]
    logk = kernel_logpdf(diff, sigma, centers.shape[1])
    log_mix = logsumexp(logk, axis=1) - math.log(centers.shape[0])
    return float(-np.mean(log_mix))


def estimate_entropy(s, sampler: Callable, cfg: EntropyConfig, rng: Rng) -> float:
    """Entropy estimate at state ``s`` for ``sampler(s, n, rng) -> (n, d_a)`` pre-smoothing actions.

    Centres and baselines use independent child streams of ``rng``.
    """
    centers = np.atleast_2d(sampler(s, cfg.M, rng.child("centers")))
    base_rng = rng.child("baselines")
    pre = np.atleast_2d(sampler(s, cfg.L, base_rng))
    xi = base_rng.normal(pre.shape)
    return plugin_entropy(centers, pre + cfg.sigma * xi, cfg.sigma)


def actor_sampler(actor) -> Callable:
    """Adapter turning an actor into the sampler expected by :func:`estimate_entropy`."""

    def sample(s, n, rng):
        s = np.asarray(s, dtype=np.float64)
        a, _ = actor.sample(np.broadcast_to(s, (n, s.shape[-1])), rng)
        return a

    return sample


def gaussian_entropy(var: float, d: int = 1) -> float:
    return 0.5 * d * math.log(2.0 * math.pi * math.e * var)
