"""Small residual MLP noise estimator, conditioned on (time step, condition
vector) through adaptive LayerNorm modulation.
"""

from __future__ import annotations

import math

import numpy as np

from .optim import ParamStore
from .tensor import (Tensor, as_tensor, layer_norm, matmul, no_grad, silu,
                     split, trunc_normal)


def sinusoidal_features(t, width: int) -> np.ndarray:
    """Raw time features: half sines, half cosines at geometric frequencies."""
    if width % 2:
        raise ValueError("time embedding width must be even")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = width // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _linear(store: ParamStore, prefix: str, x, dtype) -> Tensor:
    w = store[prefix + ".w"]
    b = store[prefix + ".b"]
    return matmul(as_tensor(x, dtype=dtype), w) + b


class DenoiserMLP:
    """eps_hat(x_t | t, z): input proj, AdaLN-modulated residual blocks, zero-init
    output proj (so the untrained net predicts zero noise for any input)."""

    def __init__(self, store: ParamStore, token_dim: int, width: int = 64,
                 blocks: int = 3, cond_dim: int | None = None,
                 rng=None, prefix: str = "denoiser"):
        self.token_dim = token_dim
        self.width = width
        self.blocks = blocks
        self.cond_dim = cond_dim if cond_dim is not None else width
        self.prefix = prefix
        dt = np.float32
        p = prefix

        def lin(name, nin, nout, zero=False):
            w = np.zeros((nin, nout), dtype=dt) if zero else trunc_normal(rng, (nin, nout), 0.02, dt)
            store.add(f"{p}.{name}.w", w)
            store.add(f"{p}.{name}.b", np.zeros(nout, dtype=dt))

        lin("in", token_dim, width)
        lin("time", width, width)
        if self.cond_dim != width:
            lin("zproj", self.cond_dim, width)
        for i in range(blocks):
            lin(f"blk{i}.mod", width, 3 * width, zero=True)
            lin(f"blk{i}.fc1", width, width)
            lin(f"blk{i}.fc2", width, width)
        lin("out", width, token_dim, zero=True)

    def condition(self, store: ParamStore, t, z) -> Tensor:
        """c = time_embed(t) + z (z projected to width when needed)."""
        dtype = store[self.prefix + ".in.w"].dtype
        feats = sinusoidal_features(t, self.width).astype(dtype)
        c = _linear(store, self.prefix + ".time", feats, dtype)
        if self.cond_dim != self.width:
            zt = _linear(store, self.prefix + ".zproj", z, dtype)
        else:
            zt = as_tensor(z, dtype=dtype)
        return c + zt

    def __call__(self, store: ParamStore, x_t, t, z) -> Tensor:
        """x_t (N, d), t (N,) ints, z (N, D) array or Tensor -> eps_hat (N, d)."""
        p = self.prefix
        dtype = store[p + ".in.w"].dtype
        c = self.condition(store, t, z)
        h = _linear(store, p + ".in", x_t, dtype)
        for i in range(self.blocks):
            raw = _linear(store, f"{p}.blk{i}.mod", c, dtype)
            scale_raw, shift, gate = split(raw, 3, axis=-1)
            u = layer_norm(h) * (scale_raw + 1.0) + shift
            u = _linear(store, f"{p}.blk{i}.fc1", u, dtype)
            u = silu(u)
            u = _linear(store, f"{p}.blk{i}.fc2", u, dtype)
            h = h + gate * u
        return _linear(store, p + ".out", h, dtype)

    def bound(self, store: ParamStore):
        """Value-level closure for samplers: (x_t, t, z) -> ndarray."""
        def fn(x_t, t, z):
            with no_grad():
                return self(store, x_t, t, z).values

        fn.token_dim = self.token_dim
        return fn
