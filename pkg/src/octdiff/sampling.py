"""Reverse-chain denoising with an adjustable starting step.

A speckled input is injected directly as x_t for a user-chosen t and the
learned reverse chain is applied down to x_0.  Each step samples

    x_{t-1} = mu(x_t, t) + sqrt(beta_t) z,   z ~ N(0, I),

except that the final t=1 step is deterministic: the true posterior variance
there is exactly zero.  Larger starting steps remove more speckle and smooth
more aggressively; sweeping t and inspecting the grid is the intended way to
pick the working point.

Real speckle is not the accumulated Gaussian noise the chain was trained on;
injecting the image as x_t leans on the Gaussian approximation, which is the
point of the method and the source of its main limitation.
"""

from __future__ import annotations

import math

import numpy as np

from .diffusion import VarianceSchedule, predict_mu_from_eps, resolve_eps_fn
from .errors import ConfigError

NORMALIZED_TOL = 1e-6


def p_sample_step(
    xt: np.ndarray,
    t: int,
    model,
    sched: VarianceSchedule,
    rng: np.random.Generator,
    add_noise: bool = True,
) -> np.ndarray:
    """One reverse step x_t -> x_{t-1}."""
    sched._check_t(t)
    eps_fn = resolve_eps_fn(model)
    mu = predict_mu_from_eps(xt, t, eps_fn(xt, t), sched)
    if not add_noise or t == 1:
        return mu
    z = rng.standard_normal(xt.shape).astype(xt.dtype, copy=False)
    return mu + math.sqrt(sched.beta(t)) * z


def denoise(
    x_noisy: np.ndarray,
    t_start: int,
    model,
    sched: VarianceSchedule,
    rng: np.random.Generator,
    add_noise: bool = True,
) -> np.ndarray:
    """Treat `x_noisy` as x_{t_start} and run the reverse chain to x_0.

    t_start=0 returns the input unchanged.  The input must be normalized to
    [-1, 1]; the output is clamped back onto that range.  `add_noise=False`
    runs the whole chain on the step means (useful for debugging; the
    stochastic chain is the real sampler).
    """
    if not 0 <= t_start <= sched.T:
        raise IndexError(f"t_start={t_start} outside 0..{sched.T}")
    lo, hi = float(np.min(x_noisy)), float(np.max(x_noisy))
    if lo < -1.0 - NORMALIZED_TOL or hi > 1.0 + NORMALIZED_TOL:
        raise ConfigError(
            f"input must be normalized to [-1, 1], got range [{lo:.4g}, {hi:.4g}]"
        )
    if t_start == 0:
        return np.array(x_noisy, copy=True)
    x = x_noisy
    for t in range(t_start, 0, -1):
        x = p_sample_step(x, t, model, sched, rng, add_noise=add_noise)
    return np.clip(x, -1.0, 1.0)


def sweep_t(
    x_noisy: np.ndarray,
    t_list: list[int],
    model,
    sched: VarianceSchedule,
    seed: int,
) -> list[tuple[int, np.ndarray]]:
    """Denoise once per requested starting step.

    Every t gets its own RNG stream derived from (seed, t), so the result for
    a given t is independent of the other entries and of their order.
    """
    if len(t_list) == 0:
        raise ConfigError("t_list is empty")
    out = []
    for t in t_list:
        rng = np.random.default_rng([seed, t])
        out.append((t, denoise(x_noisy, t, model, sched, rng)))
    return out
