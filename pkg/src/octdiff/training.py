"""Noise-prediction training.

Each step draws a uniform step index and a standard-normal noise field per
batch element, forms x_t from the closed-form marginal, and regresses the
network output onto the injected noise with mean squared error.  Optionally
the per-sample error is weighted by beta_t / (2 alpha_t (1 - alpha_bar_t)),
the coefficient the per-step KL bound attaches to the noise-prediction
residual; the plain unweighted MSE is the default.

Training is reproducible: (seed, config, dataset) fully determines parameter
initialization, the (t, eps) draws, batch order, and therefore the loss
sequence.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from typing import NamedTuple, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .diffusion import VarianceSchedule, make_linear_schedule
from .errors import ConfigError, NonFiniteLossError, ShapeMismatchError
from .model import EpsilonPredictor, NetworkConfig

_WEIGHTINGS = ("simplified", "kl_weighted")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 2
    initial_lr: float = 1e-4
    lr_halving_period_epochs: int = 5
    diffusion_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 6e-3
    loss_weighting: str = "simplified"
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr_halving_period_epochs < 1:
            raise ConfigError(f"counts must be positive: {self}")
        if self.initial_lr <= 0:
            raise ConfigError(f"initial_lr must be > 0, got {self.initial_lr}")
        if self.loss_weighting not in _WEIGHTINGS:
            raise ConfigError(
                f"unknown loss_weighting {self.loss_weighting!r}, expected {_WEIGHTINGS}"
            )

    @classmethod
    def desk(cls) -> "TrainConfig":
        """Desk-scale preset: minutes on a CPU with 64x64 phantom references.

        The gentler beta_end matches the schedule's per-step noise to
        phantom-speckle amplitudes; after min/max normalization those sit
        near 0.25-0.27 std, which this schedule reaches around step 70, so
        the whole working sweep range stays below the over-denoising
        turnover.  The full-scale default (beta_end 6e-3) suits 512x512
        scans."""
        return cls(
            epochs=12,
            lr_halving_period_epochs=4,
            initial_lr=2e-4,
            beta_end=2.5e-3,
        )

    def make_schedule(self) -> VarianceSchedule:
        return make_linear_schedule(self.diffusion_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "network" in d and isinstance(d["network"], dict):
            d["network"] = NetworkConfig.from_dict(d["network"])
        return cls(**d)

    def override(self, **kwargs) -> "TrainConfig":
        return replace(self, **kwargs)


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 0-based epoch: halves every halving period."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    return config.initial_lr * 0.5 ** (epoch // config.lr_halving_period_epochs)


def eps_prediction_loss(
    model: EpsilonPredictor,
    x0: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    sched: VarianceSchedule,
    weighting: str = "simplified",
) -> torch.Tensor:
    """Differentiable training objective for one batch.

    x0, eps: (B, 1, H, W); t: (B,) 1-based step indices.
    """
    if weighting not in _WEIGHTINGS:
        raise ConfigError(f"unknown loss_weighting {weighting!r}")
    dtype = x0.dtype
    idx = t - 1
    ab = torch.from_numpy(sched.alpha_bars.copy()).to(dtype)[idx][:, None, None, None]
    xt = torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps
    eps_hat = model(xt, t)
    per_sample = ((eps - eps_hat) ** 2).mean(dim=(1, 2, 3))
    if weighting == "kl_weighted":
        beta = torch.from_numpy(sched.betas.copy()).to(dtype)[idx]
        alpha = torch.from_numpy(sched.alphas.copy()).to(dtype)[idx]
        per_sample = per_sample * beta / (2.0 * alpha * (1.0 - ab[:, 0, 0, 0]))
    return per_sample.mean()


def training_step(
    x0_batch: np.ndarray,
    model: EpsilonPredictor,
    optimizer: torch.optim.Optimizer,
    sched: VarianceSchedule,
    config: TrainConfig,
    rng: np.random.Generator,
) -> float:
    """One optimizer update on a (B, H, W) batch of reference images.

    Returns the scalar loss; aborts on a non-finite loss rather than
    silently skipping, since that usually means a misconfigured schedule.
    """
    x0_batch = np.asarray(x0_batch)
    if x0_batch.ndim != 3:
        raise ShapeMismatchError(f"expected batch of shape (B, H, W), got {x0_batch.shape}")
    b = x0_batch.shape[0]
    t_np = rng.integers(1, sched.T + 1, size=b)
    eps_np = rng.standard_normal(x0_batch.shape)

    dtype = next(model.parameters()).dtype
    x0 = torch.from_numpy(x0_batch).to(dtype)[:, None]
    eps = torch.from_numpy(eps_np).to(dtype)[:, None]
    t = torch.from_numpy(t_np)

    loss = eps_prediction_loss(model, x0, t, eps, sched, config.loss_weighting)
    loss_value = float(loss.detach())
    if not math.isfinite(loss_value):
        raise NonFiniteLossError(f"non-finite loss {loss_value} at steps t={t_np.tolist()}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss_value


class StepLog(NamedTuple):
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list[StepLog]

    def epoch_losses(self) -> dict[int, list[float]]:
        out: dict[int, list[float]] = {}
        for row in self.history:
            out.setdefault(row.epoch, []).append(row.loss)
        return out


def build_model(config: TrainConfig) -> EpsilonPredictor:
    """Seeded model construction; called by `train` and by tests that need
    the exact initial parameters."""
    torch.manual_seed(config.seed)
    return EpsilonPredictor(config.network)


def train(dataset: Sequence[np.ndarray], config: TrainConfig, log_path=None) -> TrainResult:
    """Full training loop over a collection of reference images.

    Images must share one shape, be normalized to [-1, 1], and satisfy the
    network's divisibility constraint.  Writes a CSV loss log
    (epoch, step, loss, lr) to `log_path` if given.
    """
    if len(dataset) == 0:
        raise ConfigError("training dataset is empty")
    shapes = {np.asarray(img).shape for img in dataset}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"dataset images must share a shape, got {sorted(shapes)}")

    sched = config.make_schedule()
    model = build_model(config)
    optimizer = torch.optim.Adam(model.parameters(), lr=config.initial_lr)
    rng = np.random.default_rng(config.seed)

    stack = np.stack([np.asarray(img, dtype=np.float32) for img in dataset])
    n = len(stack)
    history: list[StepLog] = []
    global_step = 0
    for epoch in range(config.epochs):
        lr = lr_schedule(epoch, config)
        for group in optimizer.param_groups:
            group["lr"] = lr
        order = rng.permutation(n)
        for lo in range(0, n, config.batch_size):
            batch = stack[order[lo : lo + config.batch_size]]
            loss = training_step(batch, model, optimizer, sched, config, rng)
            history.append(StepLog(epoch, global_step, loss, lr))
            global_step += 1

    if log_path is not None:
        write_loss_log(history, log_path)

    ckpt = Checkpoint.from_model(
        model,
        sched,
        optimizer=optimizer,
        train_config=config.to_dict(),
        epoch=config.epochs,
        global_step=global_step,
        seed=config.seed,
    )
    return TrainResult(checkpoint=ckpt, history=history)


def write_loss_log(history: Sequence[StepLog], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "loss", "lr"])
        writer.writerows(history)


def median_epoch_loss(history: Sequence[StepLog], epoch: int) -> float:
    losses = [row.loss for row in history if row.epoch == epoch]
    if not losses:
        raise ConfigError(f"no logged steps for epoch {epoch}")
    return float(np.median(losses))
