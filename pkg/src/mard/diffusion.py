"""Per-token denoising diffusion: cosine noise schedule, forward corruption,
the denoising training loss, the ancestral reverse sampler with noise-scaled
temperature, and classifier-free guidance combination.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import faults
from .tensor import Tensor, broadcast_to, mean, reshape, sum_

COSINE_OFFSET = 0.008
BETA_CLAMP = 0.999


@dataclass(frozen=True)
class NoiseSchedule:
    """Diffusion coefficients over the retained steps.

    For a training schedule the retained steps are 1..T; a resampled schedule
    keeps an evenly spaced subsequence ending at T, with effective per-step
    coefficients recomputed from the alpha-bar ratios.
    """

    total_steps: int               # T of the underlying training schedule
    t_values: np.ndarray           # (S,) retained original steps, ascending
    beta: np.ndarray               # (S,) effective noise rate per retained step
    alpha: np.ndarray              # (S,) 1 - beta
    alpha_bar: np.ndarray          # (S,) cumulative signal retention, in (0, 1]
    alpha_bar_prev: np.ndarray     # (S,) alpha_bar at the previous retained step (1 at the first)
    sigma: np.ndarray              # (S,) sampler noise scale (posterior std)

    @property
    def steps(self) -> int:
        return len(self.t_values)

    def index_of(self, t: int) -> int:
        i = int(np.searchsorted(self.t_values, t))
        if i >= len(self.t_values) or self.t_values[i] != t:
            raise ValueError(f"step {t} is not retained by this schedule")
        return i

    def alpha_bar_at(self, t) -> np.ndarray:
        """alpha_bar for retained step(s) t (vectorized)."""
        t = np.asarray(t, dtype=np.int64)
        i = np.searchsorted(self.t_values, t)
        if np.any(i >= len(self.t_values)) or np.any(self.t_values[i] != t):
            raise ValueError("step outside the retained schedule")
        return self.alpha_bar[i]


def build_cosine_schedule(total_steps: int) -> NoiseSchedule:
    """Cosine-shaped alpha-bar over `total_steps` steps."""
    if total_steps < 1:
        raise ValueError("schedule needs at least one step")
    T = total_steps
    s = COSINE_OFFSET
    u = np.arange(T + 1, dtype=np.float64) / T
    f = np.cos((u + s) / (1.0 + s) * np.pi / 2.0) ** 2
    raw_bar = f / f[0]
    beta = np.clip(1.0 - raw_bar[1:] / raw_bar[:-1], 0.0, BETA_CLAMP)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    sigma = np.sqrt(np.maximum(sigma2, 0.0))
    if faults.active("sigma"):
        sigma = sigma * 2.0
    return NoiseSchedule(
        total_steps=T,
        t_values=np.arange(1, T + 1, dtype=np.int64),
        beta=beta, alpha=alpha, alpha_bar=alpha_bar,
        alpha_bar_prev=alpha_bar_prev, sigma=sigma,
    )


def resample_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Evenly spaced subsequence of `steps` retained steps, keeping the final one."""
    T = sched.total_steps
    if sched.steps != T:
        raise ValueError("resample from the full training schedule")
    if not 1 <= steps <= T:
        raise ValueError(f"inference steps must lie in [1, {T}], got {steps}")
    taus = np.round(np.arange(1, steps + 1, dtype=np.float64) * T / steps).astype(np.int64)
    if len(np.unique(taus)) != steps or taus[-1] != T:
        raise AssertionError("resampled step grid is not a strict subsequence")
    abar = sched.alpha_bar[taus - 1]
    abar_prev = np.concatenate([[1.0], abar[:-1]])
    alpha = abar / abar_prev
    beta = 1.0 - alpha
    sigma2 = beta * (1.0 - abar_prev) / (1.0 - abar)
    sigma = np.sqrt(np.maximum(sigma2, 0.0))
    if faults.active("sigma"):
        sigma = sigma * 2.0
    return NoiseSchedule(
        total_steps=T, t_values=taus,
        beta=beta, alpha=alpha, alpha_bar=abar,
        alpha_bar_prev=abar_prev, sigma=sigma,
    )


def schedule_to_csv(sched: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["t", "beta", "alpha", "alpha_bar", "sigma"])
        for i, t in enumerate(sched.t_values):
            w.writerow([int(t), repr(sched.beta[i]), repr(sched.alpha[i]),
                        repr(sched.alpha_bar[i]), repr(sched.sigma[i])])


def q_sample(x: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Corrupt x to step t: sqrt(a_bar)*x + sqrt(1-a_bar)*eps."""
    abar = sched.alpha_bar_at(t)
    abar = np.asarray(abar, dtype=x.dtype)
    while abar.ndim < x.ndim:
        abar = abar[..., None]
    return np.sqrt(abar) * x + np.sqrt(1.0 - abar) * eps


@dataclass
class SamplerConfig:
    steps: int = 100
    tau: float = 1.0
    omega: float = 1.0
    guidance_mode: str = "linear-ramp"  # or "constant"
    x0_clip: float = 8.0                # bound on the implied clean-token estimate

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")
        if self.tau < 0:
            raise ValueError("temperature must be >= 0")
        if self.omega < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.guidance_mode not in ("constant", "linear-ramp"):
            raise ValueError(f"unknown guidance mode {self.guidance_mode!r}")

    def omega_at(self, k: int) -> float:
        """Guidance scale at sampler position k (steps-1 = noisiest, 0 = cleanest)."""
        if self.guidance_mode == "constant" or self.steps == 1:
            return self.omega
        frac = (self.steps - 1 - k) / (self.steps - 1)
        return 1.0 + (self.omega - 1.0) * frac


def diffusion_loss(x, z: Tensor, denoise_fn, sched: NoiseSchedule, rng,
                   t_samples: int = 4, mask=None) -> Tensor:
    """Denoising loss: mean over tokens/draws of ||eps - eps_hat||^2 (summed over dims).

    x: target tokens (..., d), constant. z: condition (..., D), on the tape.
    denoise_fn(x_t (N, d), t (N,), z (N, D) Tensor) -> Tensor (N, d).
    mask: optional (...) weights; the loss becomes a weighted mean over tokens.
    """
    x = np.asarray(x)
    d = x.shape[-1]
    lead = x.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    xf = x.reshape(n, d)

    if faults.active("loss-mask"):
        mask = None

    t = rng.integers(1, sched.total_steps + 1, (n, t_samples))
    eps = rng.normal((n, t_samples, d), dtype=x.dtype)
    x_t = q_sample(xf[:, None, :], t, eps, sched)

    zr = reshape(z, (n, 1, -1))
    zr = broadcast_to(zr, (n, t_samples, z.shape[-1]))
    zr = reshape(zr, (n * t_samples, -1))
    eps_hat = denoise_fn(x_t.reshape(n * t_samples, d), t.reshape(-1), zr)

    err = eps_hat - eps.reshape(n * t_samples, d)
    per_draw = sum_(err * err, axis=-1)                      # (n * t_samples,)
    per_token = mean(reshape(per_draw, (n, t_samples)), axis=1)
    if mask is None:
        return mean(per_token)
    w = np.asarray(mask, dtype=x.dtype).reshape(n)
    total = np.maximum(w.sum(), 1.0)
    return sum_(per_token * w) * (1.0 / float(total))


def p_sample_step(x_t: np.ndarray, t: int, eps_hat: np.ndarray,
                  sched: NoiseSchedule, tau: float, rng,
                  x0_clip: float = 0.0) -> np.ndarray:
    """One reverse step from retained step t; the final (cleanest) step adds no noise.

    x0_clip > 0 bounds the implied clean-token estimate: resampled schedule
    tails amplify the noise-prediction residual by 1/sqrt(alpha_eff), so an
    unbounded estimate lets small errors explode the chain. Positions where the
    bound does not bind keep eps_hat untouched.
    """
    k = sched.index_of(t)
    a = float(sched.alpha[k])
    abar = float(sched.alpha_bar[k])
    if x0_clip > 0:
        x0 = (x_t - np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(abar)
        clipped = np.clip(x0, -x0_clip, x0_clip)
        if not np.array_equal(clipped, x0):
            adjusted = (x_t - np.sqrt(abar) * clipped) / np.sqrt(1.0 - abar)
            eps_hat = np.where(x0 == clipped, eps_hat, adjusted)
    mean_ = (x_t - ((1.0 - a) / np.sqrt(1.0 - abar)) * eps_hat) / np.sqrt(a)
    if k == 0:
        return mean_.astype(x_t.dtype, copy=False)
    delta = rng.normal(x_t.shape, dtype=np.float64)
    out = mean_ + tau * float(sched.sigma[k]) * delta
    return out.astype(x_t.dtype, copy=False)


def cfg_combine(eps_c, eps_u, omega: float):
    """eps_u + omega * (eps_c - eps_u)."""
    return eps_u + omega * (eps_c - eps_u)


def sample_token(z_c, z_u, denoise_fn, sched: NoiseSchedule,
                 cfg: SamplerConfig, rng, token_dim: int | None = None) -> np.ndarray:
    """Draw token(s) by running the reverse chain from pure noise.

    z_c: (..., D) condition values; z_u: matching unconditional values or None.
    denoise_fn(x_t (N, d), t (N,), z (N, D)) -> (N, d) array. The schedule must
    already be resampled to cfg.steps.
    """
    if sched.steps != cfg.steps:
        raise ValueError(f"schedule has {sched.steps} steps but sampler wants {cfg.steps}")
    if z_u is None and cfg.omega != 1.0:
        raise ValueError("guidance scale != 1 requires an unconditional condition")
    z_c = np.asarray(z_c)
    lead = z_c.shape[:-1]
    n = int(np.prod(lead)) if lead else 1
    zc = z_c.reshape(n, -1)
    zu = None if z_u is None else np.asarray(z_u).reshape(n, -1)

    d = token_dim if token_dim is not None else getattr(denoise_fn, "token_dim", None)
    if d is None:
        raise ValueError("pass token_dim or use a denoise_fn exposing .token_dim")
    x = rng.normal((n, d), dtype=np.float64).astype(zc.dtype)

    for k in range(sched.steps - 1, -1, -1):
        t = int(sched.t_values[k])
        tt = np.full(n, t, dtype=np.int64)
        eps = np.asarray(denoise_fn(x, tt, zc))
        omega_k = cfg.omega_at(k)
        if zu is not None and omega_k != 1.0:
            eps_u = np.asarray(denoise_fn(x, tt, zu))
            eps = cfg_combine(eps, eps_u, omega_k)
        x = p_sample_step(x, t, eps, sched, cfg.tau, rng, x0_clip=cfg.x0_clip)
    return x.reshape(*lead, d) if lead else x[0]
