"""Self-fusion: build a high-SNR reference for a slice from its neighbors.

Slices adjacent to a target within a small radius are structurally similar
enough to act as atlases for it.  Each neighbor is registered onto the
target, weighted by similarity, and averaged:

    weight_j = exp(-MSE(registered_j, target) / h),    weight_target = 1,

with the weights normalized to sum to one, so fusion is always a per-pixel
convex combination.  The bandwidth h defaults to the median neighbor MSE of
the call, which makes the weighting unit-free.

Registration is pluggable.  The built-in `translation` method does an
exhaustive integer-shift search; deformable registration belongs to external
tooling and is reached through a command template (`external` method).
"""

from __future__ import annotations

import math
import shlex
import subprocess
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import read_raw, write_raw
from .errors import ConfigError, RegistrationError, ShapeMismatchError

_METHODS = ("none", "translation", "external")


@dataclass(frozen=True)
class FusionConfig:
    radius: int = 3
    weight_bandwidth: float | None = None  # None: median neighbor MSE per call
    registration_method: str = "translation"
    max_shift: int = 10
    external_command: str | None = None

    def __post_init__(self):
        if self.radius < 1:
            raise ConfigError(f"radius must be >= 1, got {self.radius}")
        if self.weight_bandwidth is not None and self.weight_bandwidth <= 0:
            raise ConfigError(f"weight_bandwidth must be > 0, got {self.weight_bandwidth}")
        if self.registration_method not in _METHODS:
            raise ConfigError(
                f"unknown registration method {self.registration_method!r}, "
                f"expected one of {_METHODS}"
            )
        if self.max_shift < 0:
            raise ConfigError(f"max_shift must be >= 0, got {self.max_shift}")


def shift_image(img: np.ndarray, dr: int, dc: int, fill: float = 0.0) -> np.ndarray:
    """Translate by whole pixels; exposed pixels take `fill`."""
    out = np.full_like(img, fill)
    h, w = img.shape
    rs, re = max(dr, 0), min(h + dr, h)
    cs, ce = max(dc, 0), min(w + dc, w)
    if rs < re and cs < ce:
        out[rs:re, cs:ce] = img[rs - dr : re - dr, cs - dc : ce - dc]
    return out


def estimate_translation(
    moving: np.ndarray, fixed: np.ndarray, max_shift: int = 10
) -> tuple[int, int]:
    """Integer displacement of `moving` relative to `fixed`.

    Exhaustive search over (2*max_shift+1)^2 candidates, scoring by the mean
    squared difference on the overlap region; ties break toward the smallest
    displacement so identical images register as (0, 0).  The window is
    clamped to half the image extent so the overlap never drops below a
    quarter of the area.
    """
    if moving.shape != fixed.shape:
        raise ShapeMismatchError(f"shapes differ: {moving.shape} vs {fixed.shape}")
    h, w = fixed.shape
    max_shift = min(max_shift, min(h, w) // 2)

    best = None
    for dr in range(-max_shift, max_shift + 1):
        for dc in range(-max_shift, max_shift + 1):
            mov = moving[max(dr, 0) : h + min(dr, 0), max(dc, 0) : w + min(dc, 0)]
            fix = fixed[max(-dr, 0) : h - max(dr, 0), max(-dc, 0) : w - max(dc, 0)]
            score = float(np.mean((mov - fix) ** 2))
            key = (score, abs(dr) + abs(dc), abs(dr), abs(dc), dr, dc)
            if best is None or key < best[0]:
                best = (key, (dr, dc))
    return best[1]


def register(
    moving: np.ndarray,
    fixed: np.ndarray,
    method: str = "translation",
    *,
    max_shift: int = 10,
    external_command: str | None = None,
) -> np.ndarray:
    """Resample `moving` into the frame of `fixed`.

    `translation` undoes the estimated integer shift; pixels that fall
    outside the moving image are taken from `fixed`, so downstream weighted
    averages stay within the convex hull of the inputs.  `none` returns the
    moving image unchanged; `external` shells out to a command template.
    """
    if moving.shape != fixed.shape:
        raise ShapeMismatchError(f"shapes differ: {moving.shape} vs {fixed.shape}")
    if method == "none":
        return np.array(moving, copy=True)
    if method == "translation":
        dr, dc = estimate_translation(moving, fixed, max_shift)
        if (dr, dc) == (0, 0):
            return np.array(moving, copy=True)
        out = shift_image(moving, -dr, -dc)
        mask = shift_image(np.ones_like(moving), -dr, -dc) == 0.0
        out[mask] = fixed[mask]
        return out
    if method == "external":
        return _register_external(moving, fixed, external_command)
    raise ConfigError(f"unknown registration method {method!r}")


def _register_external(moving: np.ndarray, fixed: np.ndarray, command: str | None) -> np.ndarray:
    """Run a user-configured registration command.

    The template must contain {moving}, {fixed} and {out} placeholders;
    images are exchanged as raw float containers.
    """
    if not command:
        raise ConfigError("external registration needs a command template")
    for placeholder in ("{moving}", "{fixed}", "{out}"):
        if placeholder not in command:
            raise ConfigError(f"command template is missing {placeholder}")
    with tempfile.TemporaryDirectory(prefix="octdiff-reg-") as tmp:
        tmp = Path(tmp)
        paths = {
            "moving": tmp / "moving.rawf",
            "fixed": tmp / "fixed.rawf",
            "out": tmp / "registered.rawf",
        }
        write_raw(paths["moving"], moving)
        write_raw(paths["fixed"], fixed)
        argv = [
            part.format(moving=paths["moving"], fixed=paths["fixed"], out=paths["out"])
            for part in shlex.split(command)
        ]
        proc = subprocess.run(argv, capture_output=True, text=True)
        if proc.returncode != 0:
            raise RegistrationError(
                f"registration command failed with code {proc.returncode}: "
                f"{' '.join(argv)}\nstderr: {proc.stderr.strip()}"
            )
        if not paths["out"].exists():
            raise RegistrationError(f"registration command produced no output: {' '.join(argv)}")
        out = read_raw(paths["out"])
    if out.shape != fixed.shape:
        raise RegistrationError(
            f"registered image has shape {out.shape}, expected {fixed.shape}"
        )
    return out


def similarity_weight(a: np.ndarray, b: np.ndarray, h: float) -> float:
    """exp(-MSE(a, b) / h): 1 for equal images, decreasing in the MSE."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    if h <= 0:
        raise ConfigError(f"bandwidth must be > 0, got {h}")
    return math.exp(-float(np.mean((a - b) ** 2)) / h)


def fuse(volume, index: int, config: FusionConfig | None = None) -> np.ndarray:
    """Similarity-weighted average of a target slice and its registered
    neighbors within `config.radius`.

    The neighbor window truncates at the volume boundary.  A single-slice
    volume fuses to itself (with a warning).
    """
    config = config or FusionConfig()
    slices = volume.slices
    n = len(slices)
    if not 0 <= index < n:
        raise IndexError(f"slice index {index} outside 0..{n - 1}")
    target = np.asarray(slices[index], dtype=np.float64)
    if n == 1:
        warnings.warn("volume has a single slice; fusion returns it unchanged")
        return target

    neighbors = []
    for j in range(max(0, index - config.radius), min(n, index + config.radius + 1)):
        if j == index:
            continue
        registered = register(
            np.asarray(slices[j], dtype=np.float64),
            target,
            config.registration_method,
            max_shift=config.max_shift,
            external_command=config.external_command,
        )
        neighbors.append(registered)

    mses = np.array([float(np.mean((nb - target) ** 2)) for nb in neighbors])
    h = config.weight_bandwidth
    if h is None:
        h = float(np.median(mses))
        if h <= 0.0:  # all neighbors identical to the target
            h = 1.0
    weights = np.concatenate([[1.0], np.exp(-mses / h)])
    weights /= weights.sum()

    fused = weights[0] * target
    for w, nb in zip(weights[1:], neighbors):
        fused += w * nb
    return fused


def fuse_volume(volume, config: FusionConfig | None = None):
    """Fuse every slice; returns a new Volume of references."""
    from .data import Volume

    fused = np.stack([fuse(volume, i, config) for i in range(len(volume.slices))])
    return Volume(
        slices=fused.astype(np.float32),
        repeats_per_location=1,
        snr_label=volume.snr_label,
        source=volume.source,
    )
