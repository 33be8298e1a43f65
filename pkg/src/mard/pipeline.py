"""Run configuration and the assembly helpers shared by the CLI and tests:
dataset construction, model building, the training loop, checkpoint packing,
and batched image generation.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

import numpy as np

from .backbone import TransformerConfig
from .data import (SyntheticImageSpec, TokenStats, destandardize,
                   detokenize_batch, generate_dataset, standardize,
                   tokenize_batch)
from .diffusion import SamplerConfig
from .models import (Codebook, GeneratorVariant, ModelConfig, SequenceModel,
                     kmeans_codebook, train_step)
from .optim import ParamStore, load_entries, save_entries
from .rng import Rng

VARIANTS = {
    "raster-causal": GeneratorVariant(order="raster", direction="causal", preds_per_step=1),
    "random-causal": GeneratorVariant(order="random", direction="causal", preds_per_step=1),
    "random-bidirectional": GeneratorVariant(order="random", direction="bidirectional",
                                             preds_per_step="schedule"),
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Flat key=value configuration; unknown keys are rejected."""

    # data
    image_size: int = 16
    patch: int = 4
    classes: int = 4
    train_images: int = 512
    val_images: int = 256
    data_seed: int = 0
    standardize: int = 1
    # model
    variant: str = "random-bidirectional"
    head: str = "diffusion"
    width: int = 64
    blocks: int = 8
    heads: int = 4
    cls_pad: int = 8
    class_dropout: float = 0.10
    denoiser_width: int = 64
    denoiser_blocks: int = 3
    diff_train_steps: int = 1000
    diff_steps: int = 100
    t_samples: int = 4
    mask_lo: float = 0.7
    mask_hi: float = 1.0
    kvocab: int = 16
    kmeans_iters: int = 25
    # training
    train_steps: int = 600
    batch: int = 32
    lr: float = 2e-3
    warmup_frac: float = 0.1
    weight_decay: float = 0.02
    beta1: float = 0.9
    beta2: float = 0.95
    ema: float = 0.9999
    seed: int = 0
    log_every: int = 50
    resume: str = ""
    # sampling / eval
    mar_steps: int = 64
    tau: float = 1.0
    omega: float = 1.0
    guidance: str = "linear-ramp"
    sample_count: int = 64
    sample_class: int = 0
    eval_samples: int = 192
    eval_batch: int = 64
    out: str = "runs"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        if self.head not in ("diffusion", "ce", "l2"):
            raise ConfigError(f"unknown head {self.head!r}")
        if self.image_size % self.patch:
            raise ConfigError("image_size must be divisible by patch")

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        values = {}
        with open(path) as f:
            for lineno, raw in enumerate(f, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{lineno}: expected key=value")
                key, val = (part.strip() for part in line.split("=", 1))
                values[key] = val
        return cls.from_dict(values)

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            ftype = fields[key].type
            try:
                if ftype == "int":
                    kwargs[key] = int(val)
                elif ftype == "float":
                    kwargs[key] = float(val)
                else:
                    kwargs[key] = str(val)
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {val!r}") from e
        return cls(**kwargs)

    def to_file(self, path) -> None:
        with open(path, "w") as f:
            for fd in dataclasses.fields(self):
                f.write(f"{fd.name}={getattr(self, fd.name)}\n")

    def transformer_config(self) -> TransformerConfig:
        grid = self.image_size // self.patch
        return TransformerConfig(
            blocks=self.blocks, width=self.width, heads=self.heads,
            grid_h=grid, grid_w=grid,
            token_dim=self.patch * self.patch * 3,
            class_count=self.classes, cls_pad=self.cls_pad,
            class_dropout=self.class_dropout,
        )

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            variant=VARIANTS[self.variant],
            transformer=self.transformer_config(),
            head=self.head,
            denoiser_width=self.denoiser_width,
            denoiser_blocks=self.denoiser_blocks,
            diffusion_train_steps=self.diff_train_steps,
            t_samples=self.t_samples,
            kvocab=self.kvocab,
            mask_lo=self.mask_lo,
            mask_hi=self.mask_hi,
        )

    def sampler_config(self, steps=None, tau=None, omega=None) -> SamplerConfig:
        return SamplerConfig(
            steps=self.diff_steps if steps is None else steps,
            tau=self.tau if tau is None else tau,
            omega=self.omega if omega is None else omega,
            guidance_mode=self.guidance,
        )

    def image_spec(self, size=None, seed=None) -> SyntheticImageSpec:
        from .data import _DEFAULT_CLASSES

        return SyntheticImageSpec(
            resolution=self.image_size,
            classes=_DEFAULT_CLASSES[: self.classes],
            size=self.train_images if size is None else size,
            seed=self.data_seed if seed is None else seed,
        )


@dataclass
class DataBundle:
    train_images: np.ndarray
    train_labels: np.ndarray
    val_images: np.ndarray
    val_labels: np.ndarray
    stats: TokenStats
    train_tokens: np.ndarray      # standardized (and quantized for the CE head)
    train_target_idx: np.ndarray | None
    codebook: Codebook | None
    grid_h: int
    grid_w: int
    patch: int


def build_data(cfg: RunConfig) -> DataBundle:
    spec = cfg.image_spec()
    train_images, train_labels = generate_dataset(spec, "train")
    val_spec = cfg.image_spec(size=cfg.val_images)
    val_images, val_labels = generate_dataset(val_spec, "val")

    raw_tokens = tokenize_batch(train_images, cfg.patch)
    if cfg.standardize:
        stats = TokenStats.fit(raw_tokens)
    else:
        d = raw_tokens.shape[-1]
        stats = TokenStats(mean=np.zeros(d, dtype=np.float32),
                           std=np.ones(d, dtype=np.float32))
    tokens = standardize(raw_tokens, stats)

    codebook = None
    target_idx = None
    if cfg.head == "ce":
        codebook = kmeans_codebook(tokens, cfg.kvocab, iters=cfg.kmeans_iters,
                                   rng=Rng(cfg.seed).spawn(97))
        target_idx = codebook.quantize(tokens)
        tokens = codebook.dequantize(target_idx)

    grid = cfg.image_size // cfg.patch
    return DataBundle(
        train_images=train_images, train_labels=train_labels,
        val_images=val_images, val_labels=val_labels,
        stats=stats, train_tokens=tokens, train_target_idx=target_idx,
        codebook=codebook, grid_h=grid, grid_w=grid, patch=cfg.patch,
    )


def build_model(cfg: RunConfig, bundle: DataBundle | None):
    """Fresh model + parameter store + EMA shadow.

    With bundle=None (rebuilding to load a checkpoint) the CE head gets a
    placeholder codebook of the right shape, overwritten by the load.
    """
    store = ParamStore()
    codebook = bundle.codebook if bundle is not None else None
    if cfg.head == "ce" and codebook is None:
        d = cfg.patch * cfg.patch * 3
        codebook = Codebook(centroids=np.zeros((cfg.kvocab, d), dtype=np.float32))
    model = SequenceModel(store, cfg.model_config(), Rng(cfg.seed).spawn(11),
                          codebook=codebook)
    shadow = store.copy()
    return model, store, shadow


def checkpoint_entries(store: ParamStore, stats: TokenStats) -> dict:
    """Live weights + optimizer state + step + token stats, ready to save."""
    entries = {
        "_stats.mean": stats.mean,
        "_stats.std": stats.std,
        "_step": np.array([store.step], dtype=np.float32),
    }
    for name, p in store.params.items():
        entries[name] = p.values
    for name, arr in store.m.items():
        entries[name + ".m"] = arr
        entries[name + ".v"] = store.v[name]
    return entries


def ema_entries(shadow: ParamStore, stats: TokenStats) -> dict:
    entries = {
        "_stats.mean": stats.mean,
        "_stats.std": stats.std,
        "_step": np.array([shadow.step], dtype=np.float32),
    }
    for name, p in shadow.params.items():
        entries[name + ".ema"] = p.values
    return entries


def load_checkpoint_into(path, store: ParamStore) -> TokenStats:
    """Restore parameters (accepting .ema-suffixed names), optimizer moments,
    and the step counter; returns the stored token stats."""
    entries = load_entries(path)
    params = {}
    for name, arr in entries.items():
        if name.startswith("_") or name.endswith((".m", ".v")):
            continue
        params[name[:-4] if name.endswith(".ema") else name] = arr
    store.load_values(params)
    for name in store.params:
        if name + ".m" in entries:
            store.m[name] = entries[name + ".m"].astype(np.float32).copy()
            store.v[name] = entries[name + ".v"].astype(np.float32).copy()
    if "_step" in entries:
        store.step = int(entries["_step"][0])
    return TokenStats(mean=entries["_stats.mean"], std=entries["_stats.std"])


def lr_at(step: int, cfg: RunConfig) -> float:
    """Linear warmup for warmup_frac of the run, then constant."""
    warmup = max(1, int(cfg.warmup_frac * cfg.train_steps))
    if step < warmup:
        return cfg.lr * (step + 1) / warmup
    return cfg.lr


def train_model(cfg: RunConfig, bundle: DataBundle, model: SequenceModel,
                store: ParamStore, shadow: ParamStore, log=None):
    """Run cfg.train_steps optimizer steps; returns [(step, loss, lr), ...]."""
    rng = Rng(cfg.seed).spawn(23)
    n_train = len(bundle.train_tokens)
    history = []
    start = store.step
    for local in range(cfg.train_steps):
        step = start + local
        idx = rng.integers(0, n_train, (cfg.batch,))
        tokens = bundle.train_tokens[idx]
        labels = bundle.train_labels[idx]
        tidx = bundle.train_target_idx[idx] if bundle.train_target_idx is not None else None
        lr = lr_at(step, cfg)
        loss = train_step(model, store, shadow, tokens, labels, rng, lr,
                          target_idx=tidx, beta1=cfg.beta1, beta2=cfg.beta2,
                          weight_decay=cfg.weight_decay, ema_momentum=cfg.ema)
        history.append((step, loss, lr))
        if log and (local % cfg.log_every == 0 or local == cfg.train_steps - 1):
            log(step, loss, lr)
    return history


def generate_images(cfg: RunConfig, model: SequenceModel, store: ParamStore,
                    stats: TokenStats, labels, steps: int,
                    sampler: SamplerConfig, rng) -> np.ndarray:
    """Generate token grids in batches and decode them to images."""
    labels = np.asarray(labels, dtype=np.int64)
    grids = []
    for lo in range(0, len(labels), cfg.eval_batch):
        batch = labels[lo:lo + cfg.eval_batch]
        grids.append(model.generate(store, batch, steps, sampler, rng))
    tokens = np.concatenate(grids, axis=0)
    tokens = destandardize(tokens, stats)
    grid = cfg.image_size // cfg.patch
    return np.clip(detokenize_batch(tokens, grid, grid, cfg.patch), 0.0, 1.0)


def save_run(run_dir, cfg: RunConfig, store: ParamStore, shadow: ParamStore,
             stats: TokenStats, history) -> None:
    os.makedirs(run_dir, exist_ok=True)
    cfg.to_file(os.path.join(run_dir, "config.resolved"))
    save_entries(os.path.join(run_dir, "checkpoint.bin"), checkpoint_entries(store, stats))
    save_entries(os.path.join(run_dir, "checkpoint.ema.bin"), ema_entries(shadow, stats))
    with open(os.path.join(run_dir, "loss.csv"), "w") as f:
        f.write("step,loss,lr\n")
        for step, loss, lr in history:
            f.write(f"{step},{loss:.6f},{lr:.8f}\n")
