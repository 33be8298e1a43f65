"""Desk-scale quantitative evaluation: Fréchet distance between Gaussian fits
of handcrafted features, energy distance, diversity, and speed/accuracy sweeps.

The Fréchet features are raw standardized pixels plus four moments per channel,
so scores are comparable only between runs of this artifact.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

COV_REG_SCALE = 1e-6
NEGATIVE_TOL = -1e-6


@dataclass
class GaussianStats:
    mean: np.ndarray        # (m,)
    cov: np.ndarray         # (m, m), symmetric
    count: int

    @classmethod
    def from_samples(cls, x: np.ndarray) -> "GaussianStats":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or len(x) < 2:
            raise ValueError("need a (N >= 2, m) sample matrix")
        mean = x.mean(axis=0)
        cov = np.cov(x, rowvar=False)
        cov = np.atleast_2d(cov)
        cov = 0.5 * (cov + cov.T)
        return cls(mean=mean, cov=cov, count=len(x))

    @property
    def dim(self) -> int:
        return len(self.mean)


def _regularized(cov: np.ndarray) -> np.ndarray:
    m = cov.shape[0]
    reg = COV_REG_SCALE * np.trace(cov) / m
    return cov + reg * np.eye(m)


def frechet_gaussian(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)); the matrix square
    root comes from an eigendecomposition of sqrt(S_a) S_b sqrt(S_a)."""
    if a.dim != b.dim:
        raise ValueError(f"feature dimensions differ: {a.dim} vs {b.dim}")
    sa = _regularized(a.cov)
    sb = _regularized(b.cov)
    wa, va = np.linalg.eigh(sa)
    if wa.min() < NEGATIVE_TOL:
        raise ValueError("covariance not PSD after regularization")
    root_a = (va * np.sqrt(np.maximum(wa, 0.0))) @ va.T
    inner = root_a @ sb @ root_a
    inner = 0.5 * (inner + inner.T)
    wi = np.linalg.eigh(inner)[0]
    tr_sqrt = np.sqrt(np.maximum(wi, 0.0)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(sa) + np.trace(sb) - 2.0 * tr_sqrt)
    if value < NEGATIVE_TOL:
        raise ValueError(f"Fréchet distance came out negative ({value})")
    return max(value, 0.0)


def _mean_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 2048) -> float:
    """Mean Euclidean distance over the full a x b grid (diagonal included)."""
    from scipy.spatial.distance import cdist

    total = 0.0
    for lo in range(0, len(a), chunk):
        total += cdist(a[lo:lo + chunk], b).sum()
    return total / (len(a) * len(b))


def energy_distance(samples_a: np.ndarray, samples_b: np.ndarray) -> float:
    """2 E||A-B|| - E||A-A'|| - E||B-B'|| (V-statistic: zero for identical
    multisets)."""
    a = np.asarray(samples_a, dtype=np.float64)
    b = np.asarray(samples_b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both sample sets must be non-empty")
    a = a.reshape(len(a), -1)
    b = b.reshape(len(b), -1)
    if a.shape[1] != b.shape[1]:
        raise ValueError("sample dimensions differ")
    return 2.0 * _mean_pairwise(a, b) - _mean_pairwise(a, a) - _mean_pairwise(b, b)


def diversity(samples: np.ndarray) -> float:
    """Mean pairwise Euclidean distance over distinct pairs."""
    x = np.asarray(samples, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("diversity needs at least two samples")
    x = x.reshape(len(x), -1)
    total, pairs = 0.0, 0
    for i in range(len(x) - 1):
        d = np.sqrt(((x[i + 1:] - x[i]) ** 2).sum(axis=-1))
        total += d.sum()
        pairs += len(d)
    return total / pairs


# -- desk-Fréchet features --------------------------------------------------------


@dataclass
class FeatureScaler:
    """Per-channel pixel mean/std estimated on the reference split."""

    mean: np.ndarray  # (C,)
    std: np.ndarray   # (C,)

    @classmethod
    def fit(cls, images: np.ndarray) -> "FeatureScaler":
        x = np.asarray(images, dtype=np.float64)
        mean = x.mean(axis=(0, 1, 2))
        std = np.maximum(x.std(axis=(0, 1, 2)), 1e-3)
        return cls(mean=mean, std=std)


def desk_features(images: np.ndarray, scaler: FeatureScaler) -> np.ndarray:
    """Standardized raw pixels plus 4 moments (mean, std, skew, kurtosis) per
    channel: (N, H*W*C + 4C)."""
    x = (np.asarray(images, dtype=np.float64) - scaler.mean) / scaler.std
    N, H, W, C = x.shape
    flat = x.reshape(N, H * W, C)
    mu = flat.mean(axis=1)
    sd = flat.std(axis=1) + 1e-8
    centered = flat - mu[:, None, :]
    skew = (centered ** 3).mean(axis=1) / sd ** 3
    kurt = (centered ** 4).mean(axis=1) / sd ** 4
    return np.concatenate([x.reshape(N, -1), mu, sd, skew, kurt], axis=1)


def desk_frechet(images_a: np.ndarray, images_b: np.ndarray,
                 scaler: FeatureScaler) -> float:
    fa = GaussianStats.from_samples(desk_features(images_a, scaler))
    fb = GaussianStats.from_samples(desk_features(images_b, scaler))
    return frechet_gaussian(fa, fb)


# -- speed / accuracy sweep ----------------------------------------------------------


def speed_accuracy_sweep(generate_fn, score_fn, mar_steps, diff_steps,
                         timing_repeats: int = 5, timing_batch: int = 16):
    """Cross-product sweep; one row per (mar steps, diffusion steps).

    generate_fn(steps, diff_steps, batch) -> images (batch, H, W, C)
    score_fn(images) -> desk-Fréchet float
    Returns rows of dicts: steps, diff_steps, wall_ms_per_image, desk_frechet.
    """
    rows = []
    for s in mar_steps:
        times = []
        for _ in range(timing_repeats):
            t0 = time.perf_counter()
            generate_fn(s, diff_steps[0], timing_batch)
            times.append((time.perf_counter() - t0) * 1000.0 / timing_batch)
        wall = float(np.median(times))
        for ds in diff_steps:
            images = generate_fn(s, ds, None)
            rows.append({
                "steps": int(s),
                "diff_steps": int(ds),
                "wall_ms_per_image": wall,
                "desk_frechet": float(score_fn(images)),
            })
    return rows
