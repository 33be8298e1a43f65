"""One-command verification gate: independent oracle suites that need no
trained model. Each suite returns (passed, margin message); run_all() drives
them in a fixed order so the CLI can report per-suite results.
"""

from __future__ import annotations

import numpy as np

from .backbone import TransformerConfig
from .diffusion import (SamplerConfig, build_cosine_schedule, cfg_combine,
                        p_sample_step, resample_schedule, sample_token)
from .models import (GeneratorVariant, ModelConfig, SequenceModel,
                     cosine_mask_schedule)
from .optim import ParamStore, grad_check
from .rng import Rng
from .tensor import no_grad


def gaussian_eps_oracle(mu: np.ndarray, s: float, sched):
    """Closed-form optimal noise predictor for x ~ N(mu, s^2 I):
    eps*(x_t, t) = sqrt(1-abar) (x_t - sqrt(abar) mu) / (abar s^2 + 1 - abar)."""
    def fn(x_t, t, z):
        abar = sched.alpha_bar_at(t)[:, None]
        return np.sqrt(1.0 - abar) * (x_t - np.sqrt(abar) * mu) / (abar * s * s + 1.0 - abar)

    fn.token_dim = len(mu)
    return fn


def _tiny_model(head: str = "diffusion", direction: str = "bidirectional",
                order: str = "random", width: int = 16, grid: int = 2,
                token_dim: int = 8, seed: int = 7):
    cfg = ModelConfig(
        variant=GeneratorVariant(order=order, direction=direction,
                                 preds_per_step="schedule" if direction == "bidirectional" else 1),
        transformer=TransformerConfig(blocks=2, width=width, heads=2,
                                      grid_h=grid, grid_w=grid, token_dim=token_dim,
                                      class_count=2, cls_pad=2, class_dropout=0.1),
        head=head, denoiser_width=width, denoiser_blocks=1,
        diffusion_train_steps=40, t_samples=2,
    )
    store = ParamStore()
    model = SequenceModel(store, cfg, Rng(seed))
    return model, store


# -- suites -------------------------------------------------------------------


def suite_schedule() -> tuple[bool, str]:
    """Schedule invariants, the mask-schedule partition sweep, CFG linearity."""
    ok, notes = True, []
    for T in (10, 100, 1000):
        sched = build_cosine_schedule(T)
        mono = bool(np.all(np.diff(sched.alpha_bar) < 0))
        tail = float(sched.alpha_bar[-1])
        recomp = float(np.max(np.abs(sched.alpha - sched.alpha_bar / sched.alpha_bar_prev)))
        ok &= mono and tail < 1e-3 and recomp < 1e-6 and np.all(sched.sigma >= 0)
        if T == 1000:
            ok &= float(sched.alpha_bar[0]) > 0.999
        notes.append(f"T={T}: abar_T={tail:.2e} recomp={recomp:.1e}")
        full = resample_schedule(sched, T)
        ok &= bool(np.allclose(full.alpha_bar, sched.alpha_bar))
        one = resample_schedule(sched, 1)
        ok &= abs(float(one.alpha[0]) - float(sched.alpha_bar[-1])) < 1e-12

    rng = Rng(3)
    for _ in range(200):
        n = int(rng.integers(1, 80))
        k = int(rng.integers(1, n + 1))
        sizes = cosine_mask_schedule(n, k)
        ok &= int(sizes.sum()) == n and bool(np.all(sizes >= 1))

    eps_c = rng.normal((5, 3))
    eps_u = rng.normal((5, 3))
    for omega in (0.0, 0.5, 1.0, 2.0, 3.7):
        want = eps_u + omega * (eps_c - eps_u)
        ok &= bool(np.array_equal(cfg_combine(eps_c, eps_u, omega), want))
    return ok, "; ".join(notes)


def suite_gaussian_sampler(samples: int = 10_000) -> tuple[bool, str]:
    """Reverse chain with the closed-form Gaussian predictor must reproduce
    N(mu, s^2 I): mean within 0.05 s, variance within 10%."""
    mu = np.array([0.7, -0.4])
    s = 0.8
    sched = resample_schedule(build_cosine_schedule(1000), 100)
    oracle = gaussian_eps_oracle(mu, s, sched)
    rng = Rng(11)
    z = np.zeros((samples, 1))
    cfg = SamplerConfig(steps=100, tau=1.0, omega=1.0)
    x = sample_token(z, None, oracle, sched, cfg, rng, token_dim=2)
    mean_err = float(np.abs(x.mean(axis=0) - mu).max())
    var_err = float(np.abs(x.var(axis=0) / (s * s) - 1.0).max())
    passed = mean_err < 0.05 * s and var_err < 0.10
    return passed, f"mean_err={mean_err:.4f} (<{0.05 * s:.3f}), var_err={var_err:.4f} (<0.10)"


def suite_grad_check() -> tuple[bool, str]:
    """Finite-difference check of the full MAR + diffusion training loss."""
    model, store = _tiny_model()
    data_rng = Rng(5)
    tokens = data_rng.normal((2, 4, 8), dtype=np.float32)
    labels = np.array([0, 1])

    def loss_fn(params):
        return model.train_loss(params, tokens, labels, Rng(99))

    err = grad_check(loss_fn, store, step=1e-4, coords_per_param=3, rng=Rng(17))
    return err <= 1e-4, f"max rel err={err:.2e} (<=1e-4)"


def suite_loss_masking() -> tuple[bool, str]:
    """The MAR loss must ignore targets at known positions."""
    model, store = _tiny_model()
    rng = Rng(21)
    # the fresh denoiser predicts zero for any input (zero-init output
    # projection); randomize it so the loss actually depends on the targets
    out_w = store["head.mlp.out.w"]
    out_w.values = rng.normal(out_w.shape, dtype=np.float32) * 0.5
    tokens = rng.normal((2, 4, 8), dtype=np.float32)
    labels = np.array([1, 0])
    known = np.array([[True, False, True, False],
                      [False, False, True, True]])
    with no_grad():
        z = model.backbone.mar_forward(store, tokens, known, labels)
        mask = (~known).astype(np.float32)
        base = float(model.head.loss(store, z, tokens, Rng(31), mask=mask).values)
        corrupted = tokens.copy()
        corrupted[known] += 1000.0
        poked = float(model.head.loss(store, z, corrupted, Rng(31), mask=mask).values)
    delta = abs(base - poked)
    return delta < 1e-8, f"loss shift when corrupting known targets: {delta:.2e}"


def suite_cache_and_causality(n_check: int = 64) -> tuple[bool, str]:
    """Cached incremental decoding matches the full recompute; outputs are
    causal in the input order."""
    cfg = ModelConfig(
        variant=GeneratorVariant(order="raster", direction="causal", preds_per_step=1),
        transformer=TransformerConfig(blocks=2, width=32, heads=2, grid_h=8, grid_w=8,
                                      token_dim=6, class_count=2, cls_pad=2),
        head="diffusion", denoiser_width=16, denoiser_blocks=1,
        diffusion_train_steps=40,
    )
    store = ParamStore()
    model = SequenceModel(store, cfg, Rng(13))
    rng = Rng(29)
    n = n_check
    tokens = rng.normal((1, n, 6), dtype=np.float32)
    labels = np.array([0])
    order = np.arange(n)[None, :]

    from .backbone import AttentionCache

    with no_grad():
        full = model.backbone.causal_forward(store, tokens, order, labels).values
        cache = AttentionCache.empty(cfg.transformer.blocks)
        inputs = model.backbone.causal_inputs(store, tokens, order, labels).values
        stepped = np.stack(
            [model.backbone.causal_step_cached(store, cache, inputs[:, i, :]) for i in range(n)],
            axis=1)
        cache_dev = float(np.max(np.abs(full - stepped)))
        ok = cache_dev <= 1e-5 and cache.length == n

        perturbed = tokens.copy()
        j = n // 2
        perturbed[:, j:, :] += 3.0
        full_p = model.backbone.causal_forward(store, perturbed, order, labels).values
        causal_dev = float(np.max(np.abs(full[:, : j + 1] - full_p[:, : j + 1])))
        ok &= causal_dev == 0.0
    return ok, f"cache max|dz|={cache_dev:.2e} (<=1e-5), causality leak={causal_dev:.2e}"


SUITES = (
    ("schedule", suite_schedule),
    ("gaussian-sampler", suite_gaussian_sampler),
    ("grad-check", suite_grad_check),
    ("loss-masking", suite_loss_masking),
    ("cache-causality", suite_cache_and_causality),
)


def run_all(report=print) -> bool:
    all_ok = True
    for name, fn in SUITES:
        passed, margin = fn()
        all_ok &= passed
        report(f"[{'PASS' if passed else 'FAIL'}] {name}: {margin}")
    return all_ok
