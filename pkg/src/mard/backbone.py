"""Transformer backbones producing per-position condition vectors z.

Two attention regimes over the same block stack:
  * causal: GPT-style, input shifted by a class-conditioned start token,
    triangular mask, incremental decoding through a key/value cache;
  * bidirectional: MAE-style encoder over class-pad + known tokens, decoder
    over the full grid with mask tokens substituted at unknown positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import faults
from .optim import ParamStore
from .tensor import (Tensor, as_tensor, broadcast_to, concat, embedding,
                     gather_rows, layer_norm, matmul, reshape, silu, softmax,
                     swapaxes, trunc_normal)

NEG_INF = float("-inf")


@dataclass
class TransformerConfig:
    blocks: int = 8
    width: int = 64
    heads: int = 4
    grid_h: int = 4
    grid_w: int = 4
    token_dim: int = 48
    class_count: int = 4
    cls_pad: int = 64
    class_dropout: float = 0.10
    mlp_ratio: int = 4

    @property
    def max_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def dummy_class(self) -> int:
        return self.class_count

    def validate(self, direction: str):
        if self.width % self.heads:
            raise ValueError("width must be divisible by heads")
        if direction == "bidirectional" and self.blocks % 2:
            raise ValueError("bidirectional mode needs an even block count")


def classifier_free_dropout(labels, rng, p: float, dummy_class: int) -> np.ndarray:
    """Training-time label replacement with the dummy class, probability p."""
    labels = np.asarray(labels, dtype=np.int64)
    if p <= 0:
        return labels.copy()
    drop = rng.bernoulli(p, labels.shape)
    out = labels.copy()
    out[drop] = dummy_class
    return out


@dataclass
class AttentionCache:
    """Per-block stored keys/values for incrementally decoded positions."""

    keys: list          # per block: (B, H, L, dh) float arrays
    values: list
    length: int = 0

    @classmethod
    def empty(cls, blocks: int):
        return cls(keys=[None] * blocks, values=[None] * blocks, length=0)


class Backbone:
    def __init__(self, store: ParamStore, config: TransformerConfig,
                 direction: str, rng, prefix: str = "backbone"):
        if direction not in ("causal", "bidirectional"):
            raise ValueError(f"unknown attention direction {direction!r}")
        config.validate(direction)
        self.config = config
        self.direction = direction
        self.prefix = prefix
        dt = np.float32
        cfg = config
        p = prefix

        def lin(name, nin, nout):
            store.add(f"{p}.{name}.w", trunc_normal(rng, (nin, nout), 0.02, dt))
            store.add(f"{p}.{name}.b", np.zeros(nout, dtype=dt))

        def ln(name):
            store.add(f"{p}.{name}.g", np.ones(cfg.width, dtype=dt))
            store.add(f"{p}.{name}.b", np.zeros(cfg.width, dtype=dt))

        lin("tokproj", cfg.token_dim, cfg.width)
        store.add(f"{p}.posemb", trunc_normal(rng, (cfg.max_tokens, cfg.width), 0.02, dt))
        store.add(f"{p}.classemb", trunc_normal(rng, (cfg.class_count + 1, cfg.width), 0.02, dt))
        if direction == "bidirectional":
            store.add(f"{p}.clspad", trunc_normal(rng, (cfg.cls_pad, cfg.width), 0.02, dt))
            store.add(f"{p}.maskemb", trunc_normal(rng, (cfg.width,), 0.02, dt))
        for i in range(cfg.blocks):
            ln(f"blk{i}.ln1")
            lin(f"blk{i}.wq", cfg.width, cfg.width)
            lin(f"blk{i}.wk", cfg.width, cfg.width)
            lin(f"blk{i}.wv", cfg.width, cfg.width)
            lin(f"blk{i}.wo", cfg.width, cfg.width)
            ln(f"blk{i}.ln2")
            lin(f"blk{i}.fc1", cfg.width, cfg.width * cfg.mlp_ratio)
            lin(f"blk{i}.fc2", cfg.width * cfg.mlp_ratio, cfg.width)
        ln("ln_f")
        if direction == "bidirectional":
            ln("ln_enc")

    # -- shared pieces -------------------------------------------------------

    def _lin(self, store, name, x):
        return matmul(x, store[f"{self.prefix}.{name}.w"]) + store[f"{self.prefix}.{name}.b"]

    def _ln(self, store, name, x):
        return layer_norm(x) * store[f"{self.prefix}.{name}.g"] + store[f"{self.prefix}.{name}.b"]

    def _attn(self, store, i, h, mask):
        """h (B, L, W); mask broadcastable to (B, 1, L, L) additive, or None."""
        cfg = self.config
        B, L, W = h.shape
        nh, dh = cfg.heads, cfg.width // cfg.heads
        q = self._lin(store, f"blk{i}.wq", h)
        k = self._lin(store, f"blk{i}.wk", h)
        v = self._lin(store, f"blk{i}.wv", h)
        q = swapaxes(reshape(q, (B, L, nh, dh)), 1, 2)
        k = swapaxes(reshape(k, (B, L, nh, dh)), 1, 2)
        v = swapaxes(reshape(v, (B, L, nh, dh)), 1, 2)
        scores = matmul(q, swapaxes(k, -1, -2)) * (1.0 / np.sqrt(dh))
        if mask is not None:
            scores = scores + mask
        att = softmax(scores, axis=-1)
        out = matmul(att, v)
        out = reshape(swapaxes(out, 1, 2), (B, L, W))
        return self._lin(store, f"blk{i}.wo", out)

    def _block(self, store, i, h, mask):
        h = h + self._attn(store, i, self._ln(store, f"blk{i}.ln1", h), mask)
        u = self._ln(store, f"blk{i}.ln2", h)
        u = self._lin(store, f"blk{i}.fc1", u)
        u = silu(u)
        u = self._lin(store, f"blk{i}.fc2", u)
        return h + u

    # -- causal mode ----------------------------------------------------------

    def _causal_mask(self, n: int, dtype) -> np.ndarray:
        mask = np.zeros((1, 1, n, n), dtype=dtype)
        if not faults.active("causal-mask"):
            rows, cols = np.triu_indices(n, k=1)
            mask[0, 0, rows, cols] = NEG_INF
        return mask

    def causal_inputs(self, store: ParamStore, tokens, order, labels) -> Tensor:
        """Shifted input sequence: class start token, then each token carrying
        the positional embedding of the NEXT position to predict."""
        cfg = self.config
        tokens = as_tensor(tokens, dtype=np.dtype(store[f"{self.prefix}.posemb"].dtype))
        B, n, _ = tokens.shape
        order = np.asarray(order, dtype=np.int64)
        x = self._lin(store, "tokproj", tokens)              # (B, n, W)
        ordered = gather_rows(x, order)                       # token at slot i = x[order[i]]
        start = embedding(store[f"{self.prefix}.classemb"], np.asarray(labels))
        shifted = concat([reshape(start, (B, 1, cfg.width)), ordered[:, :-1, :]], axis=1)
        nextpos = embedding(store[f"{self.prefix}.posemb"], order)   # (B, n, W)
        return shifted + nextpos

    def causal_forward(self, store: ParamStore, tokens, order, labels) -> Tensor:
        """Teacher-forced pass; output i conditions the token at grid position order[i]."""
        cfg = self.config
        n = np.asarray(tokens).shape[1]
        if n > cfg.max_tokens:
            raise ValueError(f"sequence length {n} exceeds maximum {cfg.max_tokens}")
        h = self.causal_inputs(store, tokens, order, labels)
        mask = self._causal_mask(n, h.dtype)
        for i in range(cfg.blocks):
            h = self._block(store, i, h, mask)
        return self._ln(store, "ln_f", h)

    def causal_step_input(self, store: ParamStore, token, labels, next_pos) -> np.ndarray:
        """Input row for one decode step: previous token's projection (or the
        class start embedding) plus the next position's embedding."""
        cfg = self.config
        p = self.prefix
        dtype = np.dtype(store[f"{p}.posemb"].dtype)
        if token is None:
            base = store[f"{p}.classemb"].values[np.asarray(labels)]
        else:
            token = as_tensor(np.asarray(token, dtype=dtype))
            base = self._lin(store, "tokproj", token).values
        return base + store[f"{p}.posemb"].values[np.asarray(next_pos)]

    def causal_step_cached(self, store: ParamStore, cache: AttentionCache, inp) -> np.ndarray:
        """Feed one prepared input row (B, W); returns z (B, W) for the next position.

        Numerically equal (<= 1e-5) to the matching column of causal_forward.
        """
        cfg = self.config
        if cache.length >= cfg.max_tokens:
            raise ValueError("cache is full for this configuration")
        nh, dh = cfg.heads, cfg.width // cfg.heads
        h = as_tensor(np.asarray(inp)[:, None, :])            # (B, 1, W)
        B = h.shape[0]
        for i in range(cfg.blocks):
            u = self._ln(store, f"blk{i}.ln1", h)
            q = reshape(self._lin(store, f"blk{i}.wq", u), (B, 1, nh, dh)).swapaxes(1, 2)
            k = reshape(self._lin(store, f"blk{i}.wk", u), (B, 1, nh, dh)).swapaxes(1, 2)
            v = reshape(self._lin(store, f"blk{i}.wv", u), (B, 1, nh, dh)).swapaxes(1, 2)
            if cache.keys[i] is None:
                ck, cv = k.values, v.values
            else:
                ck = np.concatenate([cache.keys[i], k.values], axis=2)
                cv = np.concatenate([cache.values[i], v.values], axis=2)
            cache.keys[i], cache.values[i] = ck, cv
            scores = matmul(q, as_tensor(ck).swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
            att = softmax(scores, axis=-1)
            out = matmul(att, as_tensor(cv))
            out = reshape(out.swapaxes(1, 2), (B, 1, cfg.width))
            h = h + self._lin(store, f"blk{i}.wo", out)
            u = self._ln(store, f"blk{i}.ln2", h)
            u = self._lin(store, f"blk{i}.fc1", u)
            u = silu(u)
            u = self._lin(store, f"blk{i}.fc2", u)
            h = h + u
        cache.length += 1
        z = self._ln(store, "ln_f", h)
        return z.values[:, 0, :]

    # -- bidirectional mode ----------------------------------------------------

    def mar_forward(self, store: ParamStore, tokens, known, labels) -> Tensor:
        """Encoder over [class-pad | known tokens], decoder over the full grid
        with mask tokens at unknown positions; returns z at every grid slot
        (only unknown slots are meaningful for prediction).

        tokens (B, n, d); known (B, n) bool; labels (B,) ints.
        """
        cfg = self.config
        if self.direction != "bidirectional":
            raise ValueError("mar_forward requires a bidirectional backbone")
        tokens = np.asarray(tokens)
        known = np.asarray(known, dtype=bool)
        B, n, _ = tokens.shape
        if n > cfg.max_tokens:
            raise ValueError(f"sequence length {n} exceeds maximum {cfg.max_tokens}")
        half = cfg.blocks // 2
        p = self.prefix
        dtype = np.dtype(store[f"{p}.posemb"].dtype)
        kmask = known.astype(dtype)[..., None]                # (B, n, 1)

        cls = embedding(store[f"{p}.classemb"], np.asarray(labels))       # (B, W)
        pad = reshape(store[f"{p}.clspad"], (1, cfg.cls_pad, cfg.width))
        pad = broadcast_to(pad, (B, cfg.cls_pad, cfg.width)) + reshape(cls, (B, 1, cfg.width))

        x = self._lin(store, "tokproj", as_tensor(tokens, dtype=dtype))
        pos = reshape(store[f"{p}.posemb"][:n], (1, n, cfg.width))
        enc_tok = (x + pos) * kmask                           # unknown slots zeroed
        h = concat([pad, enc_tok], axis=1)                    # (B, pad + n, W)

        # keys at unknown token slots are invisible to everyone
        visible = np.concatenate(
            [np.ones((B, cfg.cls_pad), dtype=bool), known], axis=1)
        enc_mask = np.where(visible, 0.0, NEG_INF).astype(dtype)[:, None, None, :]
        for i in range(half):
            h = self._block(store, i, h, enc_mask)
        h = self._ln(store, "ln_enc", h)

        enc_pad, enc_tokens = h[:, :cfg.cls_pad, :], h[:, cfg.cls_pad:, :]
        maskemb = reshape(store[f"{p}.maskemb"], (1, 1, cfg.width))
        mask_tok = broadcast_to(maskemb, (B, n, cfg.width)) + pos
        dec_tok = enc_tokens * kmask + mask_tok * (1.0 - kmask)
        h = concat([enc_pad, dec_tok], axis=1)
        for i in range(half, cfg.blocks):
            h = self._block(store, i, h, None)
        h = self._ln(store, "ln_f", h)
        return h[:, cfg.cls_pad:, :]
