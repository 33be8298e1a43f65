"""Generalized autoregressive family: ordering policies, masking plans and
schedules, interchangeable per-token heads (diffusion / cross-entropy / L2),
teacher-forced training steps, and the generation loops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from . import faults
from .backbone import AttentionCache, Backbone, TransformerConfig, classifier_free_dropout
from .denoiser import DenoiserMLP
from .diffusion import (NoiseSchedule, SamplerConfig, build_cosine_schedule,
                        diffusion_loss, resample_schedule, sample_token)
from .optim import ParamStore, adamw_step, ema_update
from .tensor import (Tensor, as_tensor, matmul, mean, nll_rows, no_grad,
                     reshape, sum_, trunc_normal)


class TrainError(RuntimeError):
    pass


@dataclass(frozen=True)
class GeneratorVariant:
    order: str = "random"            # raster | random
    direction: str = "bidirectional"  # causal | bidirectional
    preds_per_step: int | str = "schedule"  # 1 or "schedule" (>1, cosine-driven)

    def __post_init__(self):
        if self.order not in ("raster", "random"):
            raise ValueError(f"unknown order policy {self.order!r}")
        if self.direction not in ("causal", "bidirectional"):
            raise ValueError(f"unknown direction {self.direction!r}")


# -- ordering and masking ----------------------------------------------------


def make_order(policy: str, n: int, rng) -> np.ndarray:
    """raster -> identity; random -> a fresh uniform permutation."""
    if n < 1:
        raise ValueError("need at least one position")
    if policy == "raster":
        return np.arange(n, dtype=np.int64)
    if policy == "random":
        return rng.permutation(n)
    raise ValueError(f"unknown order policy {policy!r}")


def sample_masking_ratio(rng, lo: float = 0.7, hi: float = 1.0) -> float:
    """Uniform masking ratio on [lo, hi]."""
    return float(lo + rng.uniform() * (hi - lo))


def cosine_mask_schedule(n: int, steps: int) -> np.ndarray:
    """Per-step prediction-set sizes: remaining-mask counts follow
    ceil(n * cos(pi/2 * k/steps)); every size >= 1; sizes sum to n."""
    if not 1 <= steps <= n:
        raise ValueError(f"steps must lie in [1, {n}], got {steps}")
    k = np.arange(steps + 1, dtype=np.float64)
    remaining = np.ceil(n * np.cos(math.pi / 2.0 * k / steps)).astype(np.int64)
    remaining[0], remaining[-1] = n, 0
    sizes = remaining[:-1] - remaining[1:]
    # redistribute so no step predicts zero tokens
    while np.any(sizes == 0):
        give = int(np.argmax(sizes == 0))
        take = int(np.argmax(sizes))
        if sizes[take] <= 1:
            raise AssertionError("cannot redistribute mask schedule")
        sizes[take] -= 1
        sizes[give] += 1
    assert sizes.sum() == n
    return sizes


@dataclass(frozen=True)
class MaskPlan:
    """Partition of n positions into ordered prediction sets."""

    perm: np.ndarray    # (n,) permutation of grid positions
    sizes: np.ndarray   # (K,) per-step set sizes, each >= 1, summing to n

    def __post_init__(self):
        n = len(self.perm)
        if sorted(self.perm.tolist()) != list(range(n)):
            raise ValueError("perm is not a permutation")
        if self.sizes.sum() != n or np.any(self.sizes < 1):
            raise ValueError("sizes must be >= 1 and sum to the position count")

    def sets(self):
        offset = 0
        for size in self.sizes:
            yield self.perm[offset:offset + int(size)]
            offset += int(size)


def make_mask_plan(n: int, steps: int, rng, policy: str = "random") -> MaskPlan:
    return MaskPlan(perm=make_order(policy, n, rng), sizes=cosine_mask_schedule(n, steps))


# -- k-means codebook (discrete-baseline tokenizer stand-in) -------------------


@dataclass
class Codebook:
    centroids: np.ndarray  # (K, d) float32

    @property
    def size(self) -> int:
        return len(self.centroids)

    def quantize(self, x: np.ndarray) -> np.ndarray:
        """Nearest centroid index (Euclidean, lowest index wins ties)."""
        flat = np.asarray(x, dtype=np.float64).reshape(-1, self.centroids.shape[1])
        d = cdist(flat, self.centroids.astype(np.float64))
        return np.argmin(d, axis=1).reshape(np.asarray(x).shape[:-1])

    def dequantize(self, idx) -> np.ndarray:
        return self.centroids[np.asarray(idx, dtype=np.int64)]


def kmeans_codebook(tokens: np.ndarray, k: int, iters: int = 25, rng=None) -> Codebook:
    """Lloyd iterations from k-means++ init; empty clusters reseed to the
    farthest point."""
    if k < 1:
        raise ValueError("codebook size must be >= 1")
    x = np.asarray(tokens, dtype=np.float64).reshape(-1, np.asarray(tokens).shape[-1])
    n = len(x)
    if n < k:
        raise ValueError(f"need at least {k} tokens, got {n}")

    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(0, n)]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        probs = d2 / max(d2.sum(), 1e-12)
        pick = int(np.searchsorted(np.cumsum(probs), rng.uniform()))
        centers[j] = x[min(pick, n - 1)]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))

    for _ in range(iters):
        assign = np.argmin(cdist(x, centers), axis=1)
        for j in range(k):
            sel = assign == j
            if sel.any():
                centers[j] = x[sel].mean(axis=0)
            else:
                far = int(np.argmax(np.min(cdist(x, centers), axis=1)))
                centers[j] = x[far]
    return Codebook(centroids=centers.astype(np.float32))


# -- heads ---------------------------------------------------------------------


class DiffusionHead:
    """Per-token denoising MLP head; sampling runs the reverse chain."""

    kind = "diffusion"

    def __init__(self, store, token_dim, cond_dim, width=64, blocks=3,
                 total_steps=1000, t_samples=4, rng=None, prefix="head"):
        self.denoiser = DenoiserMLP(store, token_dim, width=width, blocks=blocks,
                                    cond_dim=cond_dim, rng=rng, prefix=prefix + ".mlp")
        self.schedule = build_cosine_schedule(total_steps)
        self.t_samples = t_samples
        self.token_dim = token_dim
        self._resampled: dict[int, NoiseSchedule] = {}

    def loss(self, store, z, tokens, rng, mask=None) -> Tensor:
        def dn(x_t, t, zz):
            return self.denoiser(store, x_t, t, zz)

        return diffusion_loss(tokens, z, dn, self.schedule, rng,
                              t_samples=self.t_samples, mask=mask)

    def inference_schedule(self, steps: int) -> NoiseSchedule:
        if steps not in self._resampled:
            self._resampled[steps] = resample_schedule(self.schedule, steps)
        return self._resampled[steps]

    def sample(self, store, z_c, z_u, sampler: SamplerConfig, rng) -> np.ndarray:
        sched = self.inference_schedule(sampler.steps)
        return sample_token(z_c, z_u, self.denoiser.bound(store), sched, sampler, rng)


class CrossEntropyHead:
    """Categorical head over a fixed codebook: logits = W z, Gumbel-max sampling."""

    kind = "ce"

    def __init__(self, store, codebook: Codebook, cond_dim, rng=None, prefix="head"):
        self.prefix = prefix
        self.token_dim = codebook.centroids.shape[1]
        store.add(prefix + ".W", trunc_normal(rng, (cond_dim, codebook.size), 0.02, np.float32))
        store.add(prefix + ".codebook", codebook.centroids.copy(), requires_grad=False)

    def codebook(self, store) -> Codebook:
        return Codebook(centroids=store[self.prefix + ".codebook"].values)

    def logits(self, store, z) -> Tensor:
        return matmul(as_tensor(z), store[self.prefix + ".W"])

    def loss(self, store, z, target_idx, mask=None) -> Tensor:
        B = int(np.prod(np.asarray(target_idx).shape))
        logits = reshape(self.logits(store, z), (B, -1))
        rows = nll_rows(logits, np.asarray(target_idx).reshape(-1))
        if mask is None or faults.active("loss-mask"):
            return mean(rows)
        w = np.asarray(mask, dtype=logits.dtype).reshape(-1)
        return sum_(rows * w) * (1.0 / float(max(w.sum(), 1.0)))

    def sample(self, store, z_c, z_u, sampler: SamplerConfig, rng):
        if sampler.omega != 1.0:
            raise ValueError("classifier-free guidance is only defined for the diffusion head")
        idx, vec = ce_sample(store, z_c, self, sampler.tau, rng)
        return vec


def ce_sample(store, z, head: CrossEntropyHead, tau: float, rng):
    """Sample a codebook index per row of z from softmax(W z / tau) via
    Gumbel-max; tau = 0 degrades to argmax."""
    with no_grad():
        logits = head.logits(store, np.asarray(z)).values
    lead = logits.shape[:-1]
    if tau == 0.0:
        idx = np.argmax(logits, axis=-1)
    else:
        g = rng.gumbel(logits.shape)
        idx = np.argmax(logits / tau + g, axis=-1)
    idx = idx.reshape(lead)
    return idx, head.codebook(store).dequantize(idx)


class L2Head:
    """Deterministic linear readout; mean-squared-error training loss."""

    kind = "l2"

    def __init__(self, store, token_dim, cond_dim, rng=None, prefix="head"):
        self.prefix = prefix
        self.token_dim = token_dim
        store.add(prefix + ".W", trunc_normal(rng, (cond_dim, token_dim), 0.02, np.float32))
        store.add(prefix + ".b", np.zeros(token_dim, dtype=np.float32))

    def predict(self, store, z) -> Tensor:
        return matmul(as_tensor(z), store[self.prefix + ".W"]) + store[self.prefix + ".b"]

    def loss(self, store, z, tokens, mask=None) -> Tensor:
        pred = self.predict(store, z)
        err = pred - np.asarray(tokens, dtype=pred.dtype)
        per_token = mean(err * err, axis=-1)
        flat = reshape(per_token, (-1,))
        if mask is None or faults.active("loss-mask"):
            return mean(flat)
        w = np.asarray(mask, dtype=pred.dtype).reshape(-1)
        return sum_(flat * w) * (1.0 / float(max(w.sum(), 1.0)))

    def sample(self, store, z_c, z_u, sampler: SamplerConfig, rng) -> np.ndarray:
        return l2_sample(store, z_c, self)


def l2_sample(store, z, head: L2Head) -> np.ndarray:
    with no_grad():
        return head.predict(store, np.asarray(z)).values


# -- the assembled model --------------------------------------------------------


@dataclass
class ModelConfig:
    variant: GeneratorVariant = field(default_factory=GeneratorVariant)
    transformer: TransformerConfig = field(default_factory=TransformerConfig)
    head: str = "diffusion"            # diffusion | ce | l2
    denoiser_width: int = 64
    denoiser_blocks: int = 3
    diffusion_train_steps: int = 1000
    t_samples: int = 4
    kvocab: int = 16
    mask_lo: float = 0.7
    mask_hi: float = 1.0


class SequenceModel:
    """Backbone + head for one generator variant. All parameters live in the
    ParamStore passed at construction (and at every forward)."""

    def __init__(self, store: ParamStore, cfg: ModelConfig, rng, codebook: Codebook | None = None):
        self.cfg = cfg
        self.backbone = Backbone(store, cfg.transformer, cfg.variant.direction, rng.spawn(1))
        d = cfg.transformer.token_dim
        w = cfg.transformer.width
        if cfg.head == "diffusion":
            self.head = DiffusionHead(store, d, w, width=cfg.denoiser_width,
                                      blocks=cfg.denoiser_blocks,
                                      total_steps=cfg.diffusion_train_steps,
                                      t_samples=cfg.t_samples, rng=rng.spawn(2))
        elif cfg.head == "ce":
            if codebook is None:
                raise ValueError("cross-entropy head needs a codebook")
            self.head = CrossEntropyHead(store, codebook, w, rng=rng.spawn(2))
        elif cfg.head == "l2":
            self.head = L2Head(store, d, w, rng=rng.spawn(2))
        else:
            raise ValueError(f"unknown head {cfg.head!r}")

    @property
    def n_positions(self) -> int:
        return self.cfg.transformer.max_tokens

    # -- training ---------------------------------------------------------------

    def train_loss(self, store: ParamStore, tokens, labels, rng,
                   target_idx=None, train: bool = True) -> Tensor:
        """Teacher-forced loss for one batch.

        tokens (B, n, d) standardized (for the CE head: dequantized centroids);
        target_idx (B, n) codebook indices, CE head only.
        """
        cfg = self.cfg
        tokens = np.asarray(tokens)
        B, n, d = tokens.shape
        labels = np.asarray(labels, dtype=np.int64)
        if train and cfg.transformer.class_dropout > 0:
            labels = classifier_free_dropout(labels, rng,
                                             cfg.transformer.class_dropout,
                                             cfg.transformer.dummy_class)

        if cfg.variant.direction == "causal":
            order = np.stack([make_order(cfg.variant.order, n, rng) for _ in range(B)])
            z = self.backbone.causal_forward(store, tokens, order, labels)
            bsel = np.arange(B)[:, None]
            ordered = tokens[bsel, order]
            if cfg.head == "diffusion":
                return self.head.loss(store, z, ordered, rng)
            if cfg.head == "ce":
                return self.head.loss(store, z, np.asarray(target_idx)[bsel, order])
            return self.head.loss(store, z, ordered)

        masked = np.zeros((B, n), dtype=bool)
        for b in range(B):
            ratio = sample_masking_ratio(rng, cfg.mask_lo, cfg.mask_hi)
            count = int(np.clip(round(ratio * n), 1, n))
            masked[b, rng.permutation(n)[:count]] = True
        z = self.backbone.mar_forward(store, tokens, ~masked, labels)
        if cfg.head == "diffusion":
            return self.head.loss(store, z, tokens, rng, mask=masked)
        if cfg.head == "ce":
            return self.head.loss(store, z, target_idx, mask=masked)
        return self.head.loss(store, z, tokens, mask=masked)

    # -- generation ---------------------------------------------------------------

    def generate(self, store: ParamStore, labels, steps: int,
                 sampler: SamplerConfig, rng) -> np.ndarray:
        """Generate full token grids for a batch of class labels."""
        cfg = self.cfg
        n = self.n_positions
        B = len(np.asarray(labels))
        labels = np.asarray(labels, dtype=np.int64)
        if steps < 1:
            raise ValueError("generation needs at least one step")
        need_cfg = sampler.omega != 1.0
        if need_cfg and cfg.head != "diffusion":
            raise ValueError("guidance requires the diffusion head")
        dummy = np.full(B, cfg.transformer.dummy_class, dtype=np.int64)

        with no_grad():
            if cfg.variant.direction == "causal":
                if steps != n:
                    raise ValueError("one-token-at-a-time variants need steps == positions")
                return self._generate_causal(store, labels, dummy, sampler, rng, need_cfg)
            return self._generate_mar(store, labels, dummy, steps, sampler, rng, need_cfg)

    def _generate_causal(self, store, labels, dummy, sampler, rng, need_cfg):
        cfg = self.cfg
        n = self.n_positions
        B = len(labels)
        d = cfg.transformer.token_dim
        orders = np.stack([make_order(cfg.variant.order, n, rng) for _ in range(B)])
        out = np.zeros((B, n, d), dtype=np.float32)
        cache_c = AttentionCache.empty(cfg.transformer.blocks)
        cache_u = AttentionCache.empty(cfg.transformer.blocks) if need_cfg else None
        prev = None
        for i in range(n):
            inp_c = self.backbone.causal_step_input(store, prev, labels, orders[:, i])
            z_c = self.backbone.causal_step_cached(store, cache_c, inp_c)
            z_u = None
            if need_cfg:
                inp_u = inp_c if i > 0 else self.backbone.causal_step_input(
                    store, None, dummy, orders[:, 0])
                z_u = self.backbone.causal_step_cached(store, cache_u, inp_u)
            x = self.head.sample(store, z_c, z_u, sampler, rng)
            out[np.arange(B), orders[:, i]] = x
            prev = x
        return out

    def _generate_mar(self, store, labels, dummy, steps, sampler, rng, need_cfg):
        cfg = self.cfg
        n = self.n_positions
        B = len(labels)
        d = cfg.transformer.token_dim
        sizes = cosine_mask_schedule(n, steps)
        perms = np.stack([make_order(cfg.variant.order, n, rng) for _ in range(B)])
        out = np.zeros((B, n, d), dtype=np.float32)
        known = np.zeros((B, n), dtype=bool)
        bsel = np.arange(B)[:, None]
        offset = 0
        for size in sizes:
            sel = perms[:, offset:offset + int(size)]
            z_all = self.backbone.mar_forward(store, out, known, labels).values
            z_c = z_all[bsel, sel].reshape(B * int(size), -1)
            z_u = None
            if need_cfg:
                z_all_u = self.backbone.mar_forward(store, out, known, dummy).values
                z_u = z_all_u[bsel, sel].reshape(B * int(size), -1)
            x = self.head.sample(store, z_c, z_u, sampler, rng)
            out[bsel, sel] = x.reshape(B, int(size), d)
            known[bsel, sel] = True
            offset += int(size)
        if offset != n or not known.all():
            raise AssertionError("prediction sets did not cover every position exactly once")
        return out


def train_step(model: SequenceModel, store: ParamStore, shadow: ParamStore,
               tokens, labels, rng, lr: float, target_idx=None,
               beta1: float = 0.9, beta2: float = 0.95, weight_decay: float = 0.02,
               eps: float = 1e-8, ema_momentum: float = 0.9999) -> float:
    """One optimizer step (loss, backprop, AdamW, EMA); returns the loss."""
    store.zero_grad()
    loss = model.train_loss(store, tokens, labels, rng, target_idx=target_idx)
    value = float(loss.values)
    if not np.isfinite(value):
        raise TrainError(f"non-finite training loss ({value}) at step {store.step}")
    loss.backward()
    adamw_step(store, lr, beta1=beta1, beta2=beta2, weight_decay=weight_decay, eps=eps)
    ema_update(shadow, store, ema_momentum)
    return value
