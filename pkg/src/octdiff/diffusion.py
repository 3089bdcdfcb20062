"""Closed-form mathematics of a fixed-variance Gaussian diffusion chain.

The forward chain perturbs an image x_0 over T discrete steps,

    q(x_t | x_{t-1}) = N(x_t; sqrt(1 - beta_t) x_{t-1}, beta_t I),

with a variance schedule beta_1..beta_T.  Writing alpha_t = 1 - beta_t and
alpha_bar_t = prod_{s<=t} alpha_s, the marginal of any step is available in
closed form,

    q(x_t | x_0) = N(x_t; sqrt(alpha_bar_t) x_0, (1 - alpha_bar_t) I),

as is the posterior of one reverse step given the clean image,

    q(x_{t-1} | x_t, x_0) = N(x_{t-1}; mu_tilde_t(x_t, x_0), beta_tilde_t I).

The learned reverse chain keeps the variance fixed at beta_t and predicts only
the mean, parameterized through a noise regressor eps(x_t, t):

    mu(x_t, t) = (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps(x_t, t)) / sqrt(alpha_t).

Everything in this module is a pure function of immutable inputs: identical
arguments give bit-identical results.  Step indices t are 1-based (t = 1..T);
alpha_bar(0) == 1 by convention, which makes beta_tilde_1 == 0 and the final
reverse step deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, ShapeMismatchError

# A noise regressor: maps (x_t, t) to a same-shape estimate of the injected
# standard-normal noise.
EpsFn = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True)
class VarianceSchedule:
    """Per-step noise levels and every derived coefficient, precomputed.

    All arrays are float64, length T, 0-indexed internally; the scalar
    accessors take 1-based step indices and return plain Python floats so
    that downstream arithmetic preserves the image dtype.
    """

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    tilde_betas: np.ndarray
    post_coef_x0: np.ndarray
    post_coef_xt: np.ndarray

    def __post_init__(self):
        for arr in (self.betas, self.alphas, self.alpha_bars,
                    self.tilde_betas, self.post_coef_x0, self.post_coef_xt):
            arr.setflags(write=False)

    @property
    def T(self) -> int:
        return len(self.betas)

    def _check_t(self, t: int, low: int = 1) -> None:
        if not low <= t <= self.T:
            raise IndexError(f"step index t={t} outside {low}..{self.T}")

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_t(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        """Cumulative signal retention; alpha_bar(0) == 1."""
        self._check_t(t, low=0)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def tilde_beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.tilde_betas[t - 1])

    def posterior_coefs(self, t: int) -> tuple[float, float]:
        """Coefficients (on x_0, on x_t) of the reverse-step posterior mean."""
        self._check_t(t)
        return float(self.post_coef_x0[t - 1]), float(self.post_coef_xt[t - 1])


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> VarianceSchedule:
    """Build a schedule whose betas interpolate linearly from `beta_start`
    to `beta_end` inclusive over T steps.

    Derived arrays are computed in double precision: alpha_bar is a product
    of ~T near-one factors and would lose digits in float32.
    """
    if T < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got T={T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"betas must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return schedule_from_betas(betas)


def schedule_from_betas(betas: np.ndarray) -> VarianceSchedule:
    """Precompute every derived array from an explicit beta sequence."""
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or len(betas) < 2:
        raise ConfigError("betas must be a 1-D array of length >= 2")
    if np.any(betas <= 0.0) or np.any(betas >= 1.0):
        raise ConfigError("every beta must lie strictly inside (0, 1)")

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # alpha_bar_{t-1} with the alpha_bar_0 == 1 convention.
    alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])

    tilde_betas = (1.0 - alpha_bars_prev) / (1.0 - alpha_bars) * betas
    post_coef_x0 = np.sqrt(alpha_bars_prev) * betas / (1.0 - alpha_bars)
    post_coef_xt = np.sqrt(alphas) * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)

    return VarianceSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        tilde_betas=tilde_betas,
        post_coef_x0=post_coef_x0,
        post_coef_xt=post_coef_xt,
    )


def _check_same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise ShapeMismatchError(f"arrays must share a shape, got {sorted(shapes)}")


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Draw x_t from the closed-form marginal by reparameterization:
    sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    sched._check_t(t)
    _check_same_shape(x0, eps)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def q_sample_step(x_prev: np.ndarray, t: int, eps: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """One forward step: sqrt(alpha_t) * x_{t-1} + sqrt(beta_t) * eps."""
    sched._check_t(t)
    _check_same_shape(x_prev, eps)
    return math.sqrt(sched.alpha(t)) * x_prev + math.sqrt(sched.beta(t)) * eps


def q_mean_variance(x0: np.ndarray, t: int, sched: VarianceSchedule) -> tuple[np.ndarray, float]:
    """Mean and (scalar, isotropic) variance of the step-t marginal."""
    sched._check_t(t)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * x0, 1.0 - ab


def q_posterior(
    x0: np.ndarray, xt: np.ndarray, t: int, sched: VarianceSchedule
) -> tuple[np.ndarray, float]:
    """Mean and variance of the reverse-step posterior given the clean image.

    At t=1 the posterior collapses onto x0 with zero variance.
    """
    sched._check_t(t)
    _check_same_shape(x0, xt)
    coef_x0, coef_xt = sched.posterior_coefs(t)
    return coef_x0 * x0 + coef_xt * xt, sched.tilde_beta(t)


def predict_x0_from_eps(
    xt: np.ndarray, t: int, eps_hat: np.ndarray, sched: VarianceSchedule
) -> np.ndarray:
    """Invert the reparameterized forward draw:
    x0 = (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t)."""
    sched._check_t(t)
    _check_same_shape(xt, eps_hat)
    ab = sched.alpha_bar(t)
    return (xt - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def predict_mu_from_eps(
    xt: np.ndarray, t: int, eps_hat: np.ndarray, sched: VarianceSchedule
) -> np.ndarray:
    """Reverse-step mean from a noise estimate:
    (x_t - beta_t / sqrt(1 - alpha_bar_t) * eps_hat) / sqrt(alpha_t).

    With the true noise substituted for eps_hat this coincides exactly with
    the posterior mean from `q_posterior`.
    """
    sched._check_t(t)
    _check_same_shape(xt, eps_hat)
    coef = sched.beta(t) / math.sqrt(1.0 - sched.alpha_bar(t))
    return (xt - coef * eps_hat) / math.sqrt(sched.alpha(t))


def kl_gaussian(mu1, var1: float, mu2, var2: float) -> float:
    """KL divergence between isotropic Gaussians N(mu1, var1 I) and
    N(mu2, var2 I), summed over components.

    Per component this is  [var1 + (mu1-mu2)^2] / (2 var2)
    + log(sigma2/sigma1) - 1/2.  The variance part is evaluated as
    (d - log1p(d))/2 with d = var1/var2 - 1, which stays nonnegative under
    roundoff even when the variances nearly coincide.
    """
    if var1 <= 0.0 or var2 <= 0.0:
        raise ConfigError(f"variances must be positive, got ({var1}, {var2})")
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    d = (var1 - var2) / var2
    return diff.size * 0.5 * (d - math.log1p(d)) + float(np.sum(diff**2)) / (2.0 * var2)


@dataclass(frozen=True)
class ElboTerms:
    """Per-pixel decomposition of the variational bound, for diagnostics.

    prior_kl:  KL between the step-T marginal and the standard normal.
    step_kls:  Monte Carlo estimates of the reverse-step KL terms, indexed
               so step_kls[i] belongs to step t = i + 2 (t = 2..T).
    recon_mse: mean squared error of the deterministic t=1 reconstruction.
    """

    prior_kl: float
    step_kls: np.ndarray
    recon_mse: float


def elbo_terms(
    x0: np.ndarray,
    model: EpsFn,
    sched: VarianceSchedule,
    mc_samples: int,
    rng: np.random.Generator,
) -> ElboTerms:
    """Numerically decompose the variational bound for one image.

    All terms are reported per pixel.  The closing term is reported as the
    reconstruction MSE of the deterministic t=1 step rather than a Gaussian
    entropy: with the reverse variance fixed, the entropy is independent of
    the parameters and carries no diagnostic signal.  Diagnostic only; the
    training loss is the plain noise-prediction MSE.
    """
    if mc_samples < 1:
        raise ConfigError(f"mc_samples must be >= 1, got {mc_samples}")
    eps_fn = resolve_eps_fn(model)
    n_pix = x0.size
    T = sched.T

    mean_T, var_T = q_mean_variance(x0, T, sched)
    prior_kl = kl_gaussian(mean_T, var_T, np.zeros_like(mean_T), 1.0) / n_pix

    step_kls = np.zeros(T - 1)
    for t in range(2, T + 1):
        acc = 0.0
        for _ in range(mc_samples):
            eps = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
            xt = q_sample(x0, t, eps, sched)
            mu_true, var_true = q_posterior(x0, xt, t, sched)
            mu_model = predict_mu_from_eps(xt, t, eps_fn(xt, t), sched)
            acc += kl_gaussian(mu_true, var_true, mu_model, sched.beta(t)) / n_pix
        step_kls[t - 2] = acc / mc_samples

    acc = 0.0
    for _ in range(mc_samples):
        eps = rng.standard_normal(x0.shape).astype(x0.dtype, copy=False)
        x1 = q_sample(x0, 1, eps, sched)
        x0_hat = predict_x0_from_eps(x1, 1, eps_fn(x1, 1), sched)
        acc += float(np.mean((x0_hat - x0) ** 2))
    recon_mse = acc / mc_samples

    return ElboTerms(prior_kl=prior_kl, step_kls=step_kls, recon_mse=recon_mse)


def resolve_eps_fn(model) -> EpsFn:
    """Accept either a bare callable (x_t, t) -> eps_hat or any object
    exposing `predict_eps` with that signature."""
    if hasattr(model, "predict_eps"):
        return model.predict_eps
    if callable(model):
        return model
    raise TypeError(f"cannot use {type(model).__name__} as a noise regressor")
