"""Time-conditioned convolutional noise regressor.

An encoder-decoder network with skip connections predicts, from a noisy
image x_t and its step index t, the standard-normal noise that produced it.
The step index enters through a sinusoidal embedding followed by a small MLP;
each resolution level adds a learned projection of that embedding to its
feature maps.

Depth, width and normalization here are artifact choices: the desk-scale
default (depth 3, 32 base channels) trains on 64x64 phantoms in minutes,
and `NetworkConfig.full_scale()` is a wider preset for 512x512 scans.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, ShapeMismatchError

_ACTIVATIONS = {"silu": nn.SiLU, "relu": nn.ReLU}
_NORMS = ("group", "none")


@dataclass(frozen=True)
class NetworkConfig:
    base_channels: int = 32
    depth: int = 3
    time_embed_dim: int = 64
    norm: str = "group"
    activation: str = "silu"

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1 or self.time_embed_dim < 1:
            raise ConfigError(f"network dimensions must be positive: {self}")
        if self.time_embed_dim % 2 != 0:
            raise ConfigError(f"time_embed_dim must be even, got {self.time_embed_dim}")
        if self.norm not in _NORMS:
            raise ConfigError(f"unknown norm {self.norm!r}, expected one of {_NORMS}")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def divisor(self) -> int:
        """Input height/width must be divisible by this (one halving per level)."""
        return 2 ** (self.depth - 1)

    @classmethod
    def desk(cls) -> "NetworkConfig":
        """Desk-scale default: exercises the full skip/time machinery on 64x64."""
        return cls()

    @classmethod
    def tiny(cls) -> "NetworkConfig":
        """Under 5k parameters; small enough for finite-difference checks."""
        return cls(base_channels=4, depth=2, time_embed_dim=8)

    @classmethod
    def full_scale(cls) -> "NetworkConfig":
        """Wider preset sized for 512x512 scans."""
        return cls(base_channels=64, depth=5, time_embed_dim=256)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved sin/cos embedding of step indices.

    Component 2i is sin(t * w_i) and component 2i+1 is cos(t * w_i) with
    geometric frequencies w_i = 10000^(-2i/dim), so t=0 maps to the
    alternating pattern 0, 1, 0, 1, ...
    """
    if dim % 2 != 0:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    half = dim // 2
    dtype = t.dtype if t.is_floating_point() else torch.float32
    freqs = torch.exp(
        -math.log(10000.0) * 2.0 * torch.arange(half, dtype=dtype, device=t.device) / dim
    )
    angles = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.empty(t.shape[0], dim, dtype=dtype, device=t.device)
    emb[:, 0::2] = torch.sin(angles)
    emb[:, 1::2] = torch.cos(angles)
    return emb


def time_embedding(t: int, dim: int) -> np.ndarray:
    """Numpy-facing view of the same embedding, for one step index."""
    return sinusoidal_embedding(torch.tensor([t]), dim).numpy()[0]


def _norm_layer(kind: str, channels: int) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    groups = 8 if channels % 8 == 0 else 1
    return nn.GroupNorm(groups, channels)


class _TimedBlock(nn.Module):
    """Two 3x3 convs with the time embedding added between them."""

    def __init__(self, cin: int, cout: int, tdim: int, norm: str, act: type[nn.Module]):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.norm1 = _norm_layer(norm, cout)
        self.time_proj = nn.Linear(tdim, cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.norm2 = _norm_layer(norm, cout)
        self.act = act()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.act(self.norm1(self.conv1(x)))
        h = h + self.time_proj(temb)[:, :, None, None]
        return self.act(self.norm2(self.conv2(h)))


class EpsilonPredictor(nn.Module):
    """eps(x_t, t): same-shape noise estimate from a noisy image and its step."""

    def __init__(self, config: NetworkConfig | None = None):
        super().__init__()
        self.config = config or NetworkConfig()
        cfg = self.config
        act = _ACTIVATIONS[cfg.activation]
        chans = [cfg.base_channels * 2**i for i in range(cfg.depth)]

        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
            act(),
            nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim),
        )
        self.stem = nn.Conv2d(1, chans[0], 3, padding=1)
        self.enc_blocks = nn.ModuleList(
            _TimedBlock(c, c, cfg.time_embed_dim, cfg.norm, act) for c in chans
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 3, stride=2, padding=1)
            for i in range(cfg.depth - 1)
        )
        self.ups = nn.ModuleList(
            nn.ConvTranspose2d(chans[i + 1], chans[i], 2, stride=2)
            for i in range(cfg.depth - 1)
        )
        self.dec_blocks = nn.ModuleList(
            _TimedBlock(2 * chans[i], chans[i], cfg.time_embed_dim, cfg.norm, act)
            for i in range(cfg.depth - 1)
        )
        self.head = nn.Conv2d(chans[0], 1, 1)

    def forward(self, x: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        if x.ndim != 4 or x.shape[1] != 1:
            raise ShapeMismatchError(f"expected input of shape (B, 1, H, W), got {tuple(x.shape)}")
        div = self.config.divisor
        if x.shape[2] % div or x.shape[3] % div:
            raise ShapeMismatchError(
                f"height and width must be divisible by {div}, got {tuple(x.shape[2:])}"
            )
        if torch.any(t < 1):
            raise IndexError("step indices must be >= 1")

        temb = self.time_mlp(sinusoidal_embedding(t, self.config.time_embed_dim).to(x.dtype))
        h = self.stem(x)
        skips = []
        for i, block in enumerate(self.enc_blocks):
            h = block(h, temb)
            if i < len(self.downs):
                skips.append(h)
                h = self.downs[i](h)
        for i in reversed(range(len(self.ups))):
            h = self.ups[i](h)
            h = self.dec_blocks[i](torch.cat([h, skips[i]], dim=1), temb)
        return self.head(h)

    @torch.no_grad()
    def predict_eps(self, xt: np.ndarray, t: int) -> np.ndarray:
        """Numpy-facing single-image inference; the sampler's noise regressor."""
        dtype = next(self.parameters()).dtype
        x = torch.from_numpy(np.ascontiguousarray(xt)).to(dtype)[None, None]
        was_training = self.training
        self.eval()
        try:
            out = self.forward(x, torch.tensor([t]))
        finally:
            self.train(was_training)
        return out[0, 0].numpy().astype(xt.dtype, copy=False)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())
