"""Procedural toy dataset, pixel-patch tokenization, and token standardization.

Images are small RGB rasters of jittered shapes (circle / square / cross /
stripes), one shape+palette per class, with exact labels by construction.
Tokens are non-overlapping p x p patches flattened row-major.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .rng import Rng

STD_FLOOR = 1e-3

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}

# (shape, foreground RGB, background RGB)
_DEFAULT_CLASSES = (
    ("circle", (0.90, 0.30, 0.25), (0.06, 0.10, 0.22)),
    ("square", (0.25, 0.85, 0.40), (0.16, 0.07, 0.20)),
    ("cross", (0.95, 0.85, 0.25), (0.05, 0.17, 0.18)),
    ("stripes", (0.30, 0.75, 0.95), (0.20, 0.08, 0.08)),
)


@dataclass
class SyntheticImageSpec:
    resolution: int = 16
    channels: int = 3
    classes: tuple = _DEFAULT_CLASSES
    size: int = 512
    seed: int = 0
    pos_jitter: int = 2
    scale_jitter: float = 0.2
    color_jitter: float = 0.08

    @property
    def class_count(self) -> int:
        return len(self.classes)


def _render(spec: SyntheticImageSpec, class_id: int, rng: Rng) -> np.ndarray:
    shape, fg, bg = spec.classes[class_id]
    res = spec.resolution
    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64)
    cx = (res - 1) / 2.0 + float(rng.integers(-spec.pos_jitter, spec.pos_jitter + 1))
    cy = (res - 1) / 2.0 + float(rng.integers(-spec.pos_jitter, spec.pos_jitter + 1))
    scale = 1.0 + (rng.uniform() * 2.0 - 1.0) * spec.scale_jitter

    if shape == "circle":
        r = 0.30 * res * scale
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
    elif shape == "square":
        half = 0.27 * res * scale
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    elif shape == "cross":
        arm = 0.38 * res * scale
        bar = max(1.0, 0.09 * res * scale)
        horiz = (np.abs(yy - cy) <= bar) & (np.abs(xx - cx) <= arm)
        vert = (np.abs(xx - cx) <= bar) & (np.abs(yy - cy) <= arm)
        mask = horiz | vert
    elif shape == "stripes":
        period = max(2, int(round(res / 4.0 * scale)))
        phase = int(rng.integers(0, period))
        mask = ((yy.astype(np.int64) + phase) // (period // 2 + 1)) % 2 == 0
    else:
        raise ValueError(f"unknown shape {shape!r}")

    img = np.empty((res, res, 3), dtype=np.float64)
    jit_fg = np.array(fg) + (rng.uniform((3,)) * 2.0 - 1.0) * spec.color_jitter
    jit_bg = np.array(bg) + (rng.uniform((3,)) * 2.0 - 1.0) * spec.color_jitter
    img[...] = jit_bg
    img[mask] = jit_fg
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_dataset(spec: SyntheticImageSpec, split: str):
    """Deterministic class-balanced images + labels for one split."""
    if spec.class_count == 0:
        raise ValueError("need at least one class")
    if split not in _SPLIT_IDS:
        raise ValueError(f"unknown split {split!r}")
    root = Rng(spec.seed).spawn(_SPLIT_IDS[split])
    images = np.empty((spec.size, spec.resolution, spec.resolution, 3), dtype=np.float32)
    labels = np.empty(spec.size, dtype=np.int64)
    for i in range(spec.size):
        labels[i] = i % spec.class_count
        images[i] = _render(spec, int(labels[i]), root.spawn(i))
    return images, labels


# -- tokenization --------------------------------------------------------------


@dataclass
class TokenGrid:
    """h x w grid of d-dim continuous tokens for one image."""

    h: int
    w: int
    dim: int
    tokens: np.ndarray          # (h * w, d)
    label: int = -1
    image_id: int = -1
    seed: int = 0


def pixel_tokenize(image: np.ndarray, p: int, label: int = -1,
                   image_id: int = -1, seed: int = 0) -> TokenGrid:
    """Group non-overlapping p x p patches into tokens, row-major."""
    image = np.asarray(image)
    H, W, C = image.shape
    if H % p or W % p:
        raise ValueError(f"resolution {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    tok = image.reshape(h, p, w, p, C).transpose(0, 2, 1, 3, 4).reshape(h * w, p * p * C)
    return TokenGrid(h=h, w=w, dim=p * p * C, tokens=tok.astype(np.float32),
                     label=label, image_id=image_id, seed=seed)


def detokenize(grid: TokenGrid, channels: int = 3) -> np.ndarray:
    """Exact inverse of pixel_tokenize."""
    p = math.isqrt(grid.dim // channels)
    if p * p * channels != grid.dim:
        raise ValueError("token dimension is not a square patch")
    h, w = grid.h, grid.w
    img = grid.tokens.reshape(h, w, p, p, channels).transpose(0, 2, 1, 3, 4)
    return img.reshape(h * p, w * p, channels)


def tokenize_batch(images: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, C) -> (N, n_tokens, d), row-major patches."""
    N, H, W, C = images.shape
    if H % p or W % p:
        raise ValueError(f"resolution {H}x{W} not divisible by patch size {p}")
    h, w = H // p, W // p
    return (images.reshape(N, h, p, w, p, C)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(N, h * w, p * p * C).astype(np.float32))


def detokenize_batch(tokens: np.ndarray, h: int, w: int, p: int, channels: int = 3) -> np.ndarray:
    N = tokens.shape[0]
    img = tokens.reshape(N, h, w, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return img.reshape(N, h * p, w * p, channels)


# -- standardization -------------------------------------------------------------


@dataclass
class TokenStats:
    mean: np.ndarray   # (d,)
    std: np.ndarray    # (d,), floored

    @classmethod
    def fit(cls, tokens: np.ndarray) -> "TokenStats":
        """Per-dimension stats over the training split; std floored at 1e-3."""
        flat = np.asarray(tokens, dtype=np.float64).reshape(-1, tokens.shape[-1])
        mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        if np.any(std < STD_FLOOR):
            warnings.warn(f"{int((std < STD_FLOOR).sum())} token dims below std floor; clamped")
            std = np.maximum(std, STD_FLOOR)
        return cls(mean=mean.astype(np.float32), std=std.astype(np.float32))


def standardize(tokens: np.ndarray, stats: TokenStats) -> np.ndarray:
    return ((tokens - stats.mean) / stats.std).astype(np.float32)


def destandardize(tokens: np.ndarray, stats: TokenStats) -> np.ndarray:
    return (tokens * stats.std + stats.mean).astype(np.float32)


# -- image files -----------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    """Write [0,1] float RGB as binary PPM (P6) or PNG by extension."""
    arr = (np.clip(np.asarray(image), 0.0, 1.0) * 255.0).round().astype(np.uint8)
    path = str(path)
    if path.endswith(".png"):
        from PIL import Image

        Image.fromarray(arr).save(path)
        return
    H, W, _ = arr.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_image(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".png"):
        from PIL import Image

        arr = np.asarray(Image.open(path).convert("RGB"))
        return arr.astype(np.float32) / 255.0
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a P6 PPM")
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        W, H = map(int, line.split())
        maxval = int(f.readline())
        data = np.frombuffer(f.read(W * H * 3), dtype=np.uint8)
    return (data.reshape(H, W, 3).astype(np.float32)) / maxval


def write_manifest(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(columns)
        w.writerows(rows)
