"""Small feed-forward networks with hand-written backprop, Adam and Polyak averaging.

Networks are applied to batches (rows are samples). ``forward`` caches the
activations of its last call; the gradient methods reuse that cache.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numeric import Rng

ACTIVATIONS = ("tanh", "relu", "identity")
_MAGIC = b"WPNN"
_VERSION = 1


class StaleCacheError(RuntimeError):
    """Raised when a gradient is requested for an input that was not the last forward."""


class MlpNet:
    """Fully connected network; hidden layers use ``activation``, the output is linear."""

    def __init__(self, widths, activation: str = "tanh", rng: Rng | None = None, params=None):
        widths = tuple(int(w) for w in widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"need at least input and output widths >= 1, got {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; expected one of {ACTIVATIONS}")
        self.widths = widths
        self.activation = activation
        sizes = [(o, i) for i, o in zip(widths[:-1], widths[1:])]
        self.n_params = sum(o * i + o for o, i in sizes)
        self.params = np.zeros(self.n_params)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        off = 0
        for o, i in sizes:
            self.weights.append(self.params[off:off + o * i].reshape(o, i))
            off += o * i
            self.biases.append(self.params[off:off + o])
            off += o
        if params is not None:
            self.set_params(params)
        elif rng is not None:
            for w in self.weights:
                bound = 1.0 / np.sqrt(w.shape[1])
                w[...] = rng.uniform(-bound, bound, w.shape)
        self._cache = None

    @property
    def in_dim(self) -> int:
        return self.widths[0]

    @property
    def out_dim(self) -> int:
        return self.widths[-1]

    def set_params(self, flat) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {flat.shape}")
        self.params[...] = flat

    def copy(self) -> "MlpNet":
        return MlpNet(self.widths, self.activation, params=self.params.copy())

    def _act(self, z):
        # z is a fresh temporary, so it is overwritten in place
        if self.activation == "tanh":
            return np.tanh(z, out=z)
        if self.activation == "relu":
            return np.maximum(z, 0.0, out=z)
        return z

    def _act_grad(self, h):
        # derivative expressed through the activation output; relu'(0) = 0
        if self.activation == "tanh":
            g = np.multiply(h, h)
            return np.subtract(1.0, g, out=g)
        if self.activation == "relu":
            return (h > 0.0).astype(np.float64)
        return np.ones_like(h)

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.ndim != 2 or h.shape[1] != self.in_dim:
            raise ValueError(f"input width {h.shape[-1]} does not match network input {self.in_dim}")
        hs = [h]
        last = len(self.weights) - 1
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w.T
            z += b
            h = z if l == last else self._act(z)
            hs.append(h)
        self._cache = (x, single, hs)
        return h[0] if single else h

    __call__ = forward

    def backward(self, upstream, need_params: bool = True, need_input: bool = True):
        """Gradients of ``sum(upstream * output)`` w.r.t. parameters and input.

        Uses the cache of the most recent ``forward`` call. Returns
        ``(flat_param_grad or None, input_grad or None)``.
        """
        if self._cache is None:
            raise StaleCacheError("backward called before forward")
        x, single, hs = self._cache
        delta = np.asarray(upstream, dtype=np.float64)
        if single:
            delta = delta[None, :]
        if delta.shape != hs[-1].shape:
            raise ValueError(f"upstream shape {delta.shape} does not match output {hs[-1].shape}")
        grad = np.zeros(self.n_params) if need_params else None
        if need_params:
            gw, gb = self._grad_views(grad)
        gin = None
        for l in range(len(self.weights) - 1, -1, -1):
            if need_params:
                gw[l][...] = delta.T @ hs[l]
                gb[l][...] = delta.sum(axis=0)
            if l > 0:
                delta = delta @ self.weights[l]
                delta *= self._act_grad(hs[l])
            elif need_input:
                gin = delta @ self.weights[0]
        if gin is not None and single:
            gin = gin[0]
        return grad, gin

    def _grad_views(self, flat):
        gw, gb, off = [], [], 0
        for w in self.weights:
            o, i = w.shape
            gw.append(flat[off:off + o * i].reshape(o, i))
            off += o * i
            gb.append(flat[off:off + o])
            off += o
        return gw, gb

    def _check_cache(self, x) -> None:
        if self._cache is None:
            raise StaleCacheError("no forward pass has been run")
        cached = self._cache[0]
        if x is cached:
            return
        x = np.asarray(x, dtype=np.float64)
        if x.shape != cached.shape or not np.array_equal(x, cached):
            raise StaleCacheError("gradient requested for an input other than the last forward")

    def grad_params(self, x, upstream) -> np.ndarray:
        self._check_cache(x)
        return self.backward(upstream, need_params=True, need_input=False)[0]

    def grad_input(self, x, upstream) -> np.ndarray:
        self._check_cache(x)
        return self.backward(upstream, need_params=False, need_input=True)[1]

    def to_bytes(self) -> bytes:
        tag = self.activation.encode("ascii")
        head = _MAGIC + struct.pack("<II", _VERSION, len(self.widths))
        head += struct.pack(f"<{len(self.widths)}I", *self.widths)
        head += struct.pack("<B", len(tag)) + tag
        return head + self.params.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MlpNet":
        if blob[:4] != _MAGIC:
            raise ValueError("not a network snapshot (bad magic)")
        version, n = struct.unpack_from("<II", blob, 4)
        if version != _VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        off = 12
        widths = struct.unpack_from(f"<{n}I", blob, off)
        off += 4 * n
        (tlen,) = struct.unpack_from("<B", blob, off)
        off += 1
        activation = blob[off:off + tlen].decode("ascii")
        off += tlen
        params = np.frombuffer(blob, dtype="<f8", offset=off)
        net = cls(widths, activation)
        net.set_params(params)
        return net


@dataclass
class AdamState:
    n: int
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(default=None, repr=False)
    v: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n)
        if self.v is None:
            self.v = np.zeros(self.n)
        if self.m.shape != (self.n,) or self.v.shape != (self.n,):
            raise ValueError("moment vectors must match the parameter length")


def adam_step(params, grad, st: AdamState) -> np.ndarray:
    """One bias-corrected Adam step (descent). Mutates ``st``, returns the new parameters."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != (st.n,) or grad.shape != (st.n,):
        raise ValueError(f"length mismatch: params {params.shape}, grad {grad.shape}, state {st.n}")
    st.t += 1
    st.m *= st.beta1
    st.m += (1.0 - st.beta1) * grad
    st.v *= st.beta2
    st.v += (1.0 - st.beta2) * grad * grad
    m_hat = st.m / (1.0 - st.beta1 ** st.t)
    v_hat = st.v / (1.0 - st.beta2 ** st.t)
    return params - st.lr * m_hat / (np.sqrt(v_hat) + st.eps)


def polyak(target, online, sigma: float) -> np.ndarray:
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"mixing coefficient must lie in [0, 1], got {sigma}")
    target = np.asarray(target, dtype=np.float64)
    online = np.asarray(online, dtype=np.float64)
    if target.shape != online.shape:
        raise ValueError(f"shape mismatch {target.shape} vs {online.shape}")
    return sigma * online + (1.0 - sigma) * target
