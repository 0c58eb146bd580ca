"""Seeded random streams and the small dense kernels shared by the package."""
from __future__ import annotations

import zlib

import numpy as np


def _label_key(label: str) -> int:
    return zlib.crc32(label.encode("utf-8"))


class Rng:
    """Seedable random stream that can be split into labelled children.

    A child is derived from ``(seed, path)`` only, so draws made on a sibling
    never perturb it. Uniform bits come from PCG64; Gaussians are produced
    by the polar Box-Muller method with both outputs of each pair consumed.
    """

    def __init__(self, seed: int, path: tuple[str, ...] = ()):
        seed = int(seed)
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = seed
        self.path = tuple(path)
        ss = np.random.SeedSequence(seed, spawn_key=tuple(_label_key(p) for p in self.path))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def child(self, label: str) -> "Rng":
        return Rng(self.seed, self.path + (label,))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={'/'.join(self.path) or '<root>'})"

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def integers(self, high: int, size=None) -> np.ndarray:
        return self._gen.integers(0, high, size)

    def gaussian(self, n: int) -> np.ndarray:
        """``n`` i.i.d. standard normal draws (polar Box-Muller)."""
        n = int(n)
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        pairs = (n + 1) // 2
        out = []
        have = 0
        while have < pairs:
            # acceptance rate of the unit disc is pi/4
            k = int((pairs - have) / 0.78) + 8
            u = 2.0 * self._gen.random((k, 2)) - 1.0
            s = u[:, 0] ** 2 + u[:, 1] ** 2
            ok = (s > 0.0) & (s < 1.0)
            u, s = u[ok], s[ok]
            f = np.sqrt(-2.0 * np.log(s) / s)
            out.append(u * f[:, None])
            have += len(s)
        z = np.concatenate(out)[:pairs].reshape(-1)
        return z[:n]

    def normal(self, shape) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        size = int(np.prod(shape))
        if size == 0:
            return np.zeros(shape)
        return self.gaussian(size).reshape(shape)


def as_vec(x, n: int | None = None, name: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ValueError(f"{name} must have length {n}, got {v.shape[0]}")
    return v


def as_mat(x, name: str = "matrix") -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    return m


def mat_vec(m, v) -> np.ndarray:
    m = as_mat(m)
    v = as_vec(v)
    if m.shape[1] != v.shape[0]:
        raise ValueError(f"dimension mismatch: matrix {m.shape} times vector ({v.shape[0]},)")
    return m @ v


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    out = np.log(np.sum(np.exp(x - mx), axis=axis, keepdims=True)) + mx
    return np.squeeze(out, axis=axis) if axis is not None else out.reshape(())[()]
