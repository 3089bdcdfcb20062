"""Quantitative evaluation of denoised b-scans.

Definitions (the common coherent-imaging conventions; callers supply the
regions of interest):

    SNR  = 10 log10(max_signal^2 / var_b)         max over foreground ROIs,
                                                  variance over background ROIs
    PSNR = 10 log10(peak^2 / MSE)                 peak = reference dynamic range
    CNR  = (mu_f - mu_b) / sqrt((var_f + var_b)/2)   averaged over foreground ROIs
    ENL  = mu^2 / var                             averaged over homogeneous ROIs

Absolute values depend on the intensity domain, so every report records
whether it was computed on original intensities or on the [-1, 1] range.
All statistics use the unbiased (n-1) variance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import ConfigError, DegenerateInputError, ShapeMismatchError


@dataclass(frozen=True)
class Rect:
    """Axis-aligned ROI: (top, left) corner plus height and width."""

    top: int
    left: int
    height: int
    width: int

    def __post_init__(self):
        if self.top < 0 or self.left < 0 or self.height < 1 or self.width < 1:
            raise ConfigError(f"invalid rectangle {self}")

    def check_within(self, shape: tuple[int, int]) -> None:
        if self.top + self.height > shape[0] or self.left + self.width > shape[1]:
            raise ConfigError(f"rectangle {self} exceeds image shape {shape}")

    def extract(self, img: np.ndarray) -> np.ndarray:
        self.check_within(img.shape)
        return img[self.top : self.top + self.height, self.left : self.left + self.width]


@dataclass(frozen=True)
class ROISet:
    background: tuple[Rect, ...] = ()
    foreground: tuple[Rect, ...] = ()
    homogeneous: tuple[Rect, ...] = ()

    def to_dict(self) -> dict:
        return {
            name: [[r.top, r.left, r.height, r.width] for r in getattr(self, name)]
            for name in ("background", "foreground", "homogeneous")
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ROISet":
        return cls(
            **{
                name: tuple(Rect(*vals) for vals in d.get(name, []))
                for name in ("background", "foreground", "homogeneous")
            }
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "ROISet":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _gather(img: np.ndarray, rects: Sequence[Rect], kind: str) -> np.ndarray:
    if not rects:
        raise ConfigError(f"metric needs at least one {kind} ROI")
    return np.concatenate([r.extract(img).ravel() for r in rects])


def snr(img: np.ndarray, rois: ROISet) -> float:
    """Peak foreground signal against background variance, in dB."""
    bg = _gather(img, rois.background, "background")
    var_b = float(np.var(bg, ddof=1))
    if var_b == 0.0:
        raise DegenerateInputError("background ROI has zero variance")
    peak = float(np.max(_gather(img, rois.foreground, "foreground")))
    return 10.0 * math.log10(peak**2 / var_b)


def psnr(img: np.ndarray, reference: np.ndarray) -> float:
    """Peak signal-to-noise against a reference, in dB.

    The peak is the reference's dynamic range.  Identical images have zero
    error; that is reported as the infinity sentinel.
    """
    if img.shape != reference.shape:
        raise ShapeMismatchError(f"shapes differ: {img.shape} vs {reference.shape}")
    mse = float(np.mean((np.asarray(img, np.float64) - np.asarray(reference, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    peak = float(np.max(reference) - np.min(reference))
    if peak == 0.0:
        raise DegenerateInputError("reference image has no dynamic range")
    return 10.0 * math.log10(peak**2 / mse)


def cnr(img: np.ndarray, rois: ROISet) -> float:
    """Foreground/background mean separation over pooled spread."""
    bg = _gather(img, rois.background, "background")
    mu_b, var_b = float(np.mean(bg)), float(np.var(bg, ddof=1))
    values = []
    for rect in rois.foreground or ():
        fg = rect.extract(img).ravel()
        mu_f, var_f = float(np.mean(fg)), float(np.var(fg, ddof=1))
        denom = math.sqrt(0.5 * (var_f + var_b))
        if denom == 0.0:
            raise DegenerateInputError(f"zero pooled variance for ROI {rect}")
        values.append((mu_f - mu_b) / denom)
    if not values:
        raise ConfigError("metric needs at least one foreground ROI")
    return float(np.mean(values))


def enl(img: np.ndarray, rois: ROISet) -> float:
    """Equivalent number of looks: higher means smoother speckle."""
    values = []
    for rect in rois.homogeneous or ():
        px = rect.extract(img).ravel()
        var = float(np.var(px, ddof=1))
        if var == 0.0:
            raise DegenerateInputError(f"homogeneous ROI {rect} has zero variance")
        values.append(float(np.mean(px)) ** 2 / var)
    if not values:
        raise ConfigError("metric needs at least one homogeneous ROI")
    return float(np.mean(values))


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Paired two-tailed t-test; returns (t statistic, p value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeMismatchError("paired samples must be equal-length 1-D sequences")
    n = len(a)
    if n < 2:
        raise ConfigError(f"need at least 2 pairs, got {n}")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateInputError("paired differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    p = 2.0 * float(stats.t.sf(abs(t), df=n - 1))
    return t, p


@dataclass
class MetricsReport:
    """One image's metric values plus enough provenance to reproduce them."""

    image_id: str
    reference_id: str
    domain: str  # "original" or "normalized"
    snr: float
    psnr: float
    cnr: float
    enl: float
    rois: ROISet = field(repr=False, default_factory=ROISet)

    CSV_HEADER = ("image_id", "reference_id", "domain", "snr", "psnr", "cnr", "enl")

    def as_row(self) -> list:
        return [self.image_id, self.reference_id, self.domain,
                self.snr, self.psnr, self.cnr, self.enl]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rois"] = self.rois.to_dict()
        return d


def evaluate_pair(
    img: np.ndarray,
    reference: np.ndarray,
    rois: ROISet,
    image_id: str = "",
    reference_id: str = "",
    domain: str = "normalized",
) -> MetricsReport:
    """Compute the full metric suite for one image against its reference."""
    return MetricsReport(
        image_id=image_id,
        reference_id=reference_id,
        domain=domain,
        snr=snr(img, rois),
        psnr=psnr(img, reference),
        cnr=cnr(img, rois),
        enl=enl(img, rois),
        rois=rois,
    )
