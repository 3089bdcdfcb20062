"""Volume ingestion, normalization, padding, repeat averaging, and synthetic
speckle phantoms for desk-scale verification.

On-disk formats
---------------
raw container (.rawf)   4-byte little-endian header length, a JSON header
                        {"format", "shape", "dtype"}, then contiguous
                        little-endian float32 pixels in C order.  Lossless
                        for the float32 pipeline; the reproducibility format.
PNG (.png)              16-bit grayscale; pixel values map [-1, 1] onto
                        0..65535, so a round trip is exact to within
                        1/65535 of the range.  For normalized images only.
TIFF (.tif/.tiff)       float32 pages, lossless; a multi-page file is a volume.

Dataset manifests are JSON files listing per-item image paths (relative to
the manifest's directory); see the README for the schema.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import tifffile
from PIL import Image as PILImage

from .errors import ConfigError, DataFormatError, DegenerateInputError, ShapeMismatchError
from .metrics import Rect, ROISet

_RAW_FORMAT = "octdiff.raw"
_PNG_TOL = 1e-6


# ---------------------------------------------------------------------------
# elementary image operations
# ---------------------------------------------------------------------------

def normalize(img: np.ndarray) -> np.ndarray:
    """Affinely map the image's [min, max] onto [-1, 1] exactly."""
    img = np.asarray(img, dtype=np.float32)
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        raise DegenerateInputError(f"constant image (value {lo}) has no dynamic range")
    return (img - lo) * (2.0 / (hi - lo)) - 1.0


def intensity_bounds(img: np.ndarray) -> tuple[float, float]:
    """The (min, max) pair `normalize` maps onto [-1, 1]; keep it when the
    original intensity scale must be recoverable."""
    return float(np.min(img)), float(np.max(img))


def denormalize(img: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map a normalized [-1, 1] image back onto original intensities."""
    if hi <= lo:
        raise ConfigError(f"invalid intensity bounds ({lo}, {hi})")
    return (np.asarray(img, dtype=np.float64) + 1.0) * ((hi - lo) / 2.0) + lo


def normalize_volume(volume: "Volume") -> "Volume":
    """Normalize with one affine map shared by every slice (per-volume mode;
    per-image `normalize` is the default elsewhere)."""
    stack = np.asarray(volume.slices, dtype=np.float32)
    lo, hi = float(stack.min()), float(stack.max())
    if hi == lo:
        raise DegenerateInputError("constant volume has no dynamic range")
    return Volume(
        slices=(stack - lo) * (2.0 / (hi - lo)) - 1.0,
        repeats_per_location=volume.repeats_per_location,
        snr_label=volume.snr_label,
        source=volume.source,
    )


def pad_to_square(img: np.ndarray, target: int, fill: float = -1.0) -> np.ndarray:
    """Center the image on a target x target canvas.

    The pad value defaults to -1, the background black level of the
    normalized range; zero there would be mid-gray and add artificial edges.
    An odd margin puts the extra row/column at the bottom/right.
    """
    h, w = img.shape
    if h > target or w > target:
        raise ConfigError(f"image {h}x{w} exceeds target {target}")
    out = np.full((target, target), fill, dtype=img.dtype)
    top, left = (target - h) // 2, (target - w) // 2
    out[top : top + h, left : left + w] = img
    return out


def crop_to_shape(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Inverse of `pad_to_square` for a known original shape."""
    h, w = shape
    if h > img.shape[0] or w > img.shape[1]:
        raise ConfigError(f"cannot crop {img.shape} to larger {shape}")
    top, left = (img.shape[0] - h) // 2, (img.shape[1] - w) // 2
    return img[top : top + h, left : left + w].copy()


def average_repeats(frames: Sequence[np.ndarray]) -> np.ndarray:
    """Pixel-wise mean of repeated acquisitions at one location."""
    if len(frames) < 2:
        raise ConfigError(f"need at least 2 frames to average, got {len(frames)}")
    shapes = {np.asarray(f).shape for f in frames}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"frames must share a shape, got {sorted(shapes)}")
    return np.mean(np.stack(frames), axis=0)


# ---------------------------------------------------------------------------
# volumes
# ---------------------------------------------------------------------------

@dataclass
class Volume:
    """Ordered stack of same-shape b-scans.

    When acquisitions are repeated per location, the repeats are interleaved:
    slices [i*r, (i+1)*r) all image location i.
    """

    slices: np.ndarray
    repeats_per_location: int = 1
    snr_label: str | None = None
    source: str | None = None

    def __post_init__(self):
        self.slices = np.asarray(self.slices)
        if self.slices.ndim != 3:
            raise ShapeMismatchError(f"volume needs a (n, h, w) stack, got {self.slices.shape}")
        if self.repeats_per_location < 1:
            raise ConfigError(f"repeats_per_location must be >= 1, got {self.repeats_per_location}")
        if len(self.slices) % self.repeats_per_location != 0:
            raise ConfigError(
                f"{len(self.slices)} slices not divisible by "
                f"{self.repeats_per_location} repeats per location"
            )

    def __len__(self) -> int:
        return len(self.slices)

    def group_repeats(self) -> Iterator[np.ndarray]:
        r = self.repeats_per_location
        for i in range(len(self.slices) // r):
            yield self.slices[i * r : (i + 1) * r]

    def location_means(self) -> "Volume":
        """Average the repeat groups into a ground-truth volume."""
        if self.repeats_per_location < 2:
            raise ConfigError("volume has no repeated acquisitions to average")
        means = np.stack([average_repeats(list(group)) for group in self.group_repeats()])
        return Volume(means, 1, self.snr_label, self.source)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

_SPECKLE_MODELS = ("gamma_multiplicative", "gaussian_additive", "none")


@dataclass(frozen=True)
class PhantomSpec:
    """Layered tissue-like test image with optional dark vessel ellipses.

    The top quarter is a dark background band and the second quarter a bright
    layer with a guaranteed level, so ROI placement is deterministic; the
    lower half is randomized bands.  Vessels only appear in the lower half,
    away from the standard ROIs.
    """

    size: int = 64
    n_layers: int = 4
    n_vessels: int = 2
    speckle: str = "gamma_multiplicative"
    gamma_shape: float = 2.0
    gaussian_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.size < 32:
            raise ConfigError(f"phantom size must be >= 32, got {self.size}")
        if self.speckle not in _SPECKLE_MODELS:
            raise ConfigError(f"unknown speckle model {self.speckle!r}, expected {_SPECKLE_MODELS}")
        if self.gamma_shape <= 0 or self.gaussian_sigma <= 0:
            raise ConfigError("speckle parameters must be positive")
        if self.n_layers < 1 or self.n_vessels < 0:
            raise ConfigError(f"invalid layer/vessel counts in {self}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomSpec":
        return cls(**d)


def _phantom_clean(spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    n = spec.size
    img = np.full((n, n), 0.06, dtype=np.float32)           # dark background band
    img[n // 4 : n // 2] = rng.uniform(0.55, 0.9)           # guaranteed bright layer
    edges = np.sort(rng.integers(n // 2, n, size=max(spec.n_layers - 2, 0)))
    bounds = [n // 2, *edges.tolist(), n]
    for lo, hi in zip(bounds, bounds[1:]):
        if hi > lo:
            img[lo:hi] = rng.uniform(0.2, 0.85)
    rows, cols = np.mgrid[0:n, 0:n]
    for _ in range(spec.n_vessels):
        cy = rng.uniform(0.55 * n, 0.85 * n)
        cx = rng.uniform(0.4 * n, 0.85 * n)
        ry = rng.uniform(n / 24, n / 10)
        rx = rng.uniform(n / 24, n / 10)
        inside = ((rows - cy) / ry) ** 2 + ((cols - cx) / rx) ** 2 <= 1.0
        img[inside] *= 0.3
    return img


def apply_speckle(clean: np.ndarray, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    """Corrupt a [0, 1] intensity image with the configured noise model.

    Mean-1 gamma speckle multiplies each pixel by gamma(k, 1/k), so a
    homogeneous region keeps its mean and gets mu^2/var = k (the equivalent
    number of looks).
    """
    if spec.speckle == "none":
        return clean.copy()
    if spec.speckle == "gamma_multiplicative":
        k = spec.gamma_shape
        return (clean * rng.gamma(k, 1.0 / k, size=clean.shape)).astype(np.float32)
    return (clean + rng.normal(0.0, spec.gaussian_sigma, size=clean.shape)).astype(np.float32)


def make_phantom(spec: PhantomSpec, rng: np.random.Generator | None = None):
    """One (clean, noisy) pair, both normalized to [-1, 1]."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    clean = _phantom_clean(spec, rng)
    noisy = apply_speckle(clean, spec, rng)
    return normalize(clean), normalize(noisy)


def make_phantom_volume_raw(spec: PhantomSpec, n_slices: int = 7, rng=None):
    """Like `make_phantom_volume` but in original [0, ~) intensities,
    for workflows that must keep the physical scale."""
    if n_slices < 1:
        raise ConfigError(f"n_slices must be >= 1, got {n_slices}")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    clean = _phantom_clean(spec, rng)
    slices = np.stack([apply_speckle(clean, spec, rng) for _ in range(n_slices)])
    return clean, slices


def make_phantom_volume(spec: PhantomSpec, n_slices: int = 7, rng=None):
    """A mini-volume: one clean structure, independent speckle per slice.

    Returns (normalized clean image, Volume of normalized noisy slices).
    """
    clean, slices = make_phantom_volume_raw(spec, n_slices, rng)
    return (
        normalize(clean),
        Volume(np.stack([normalize(s) for s in slices]), 1, None, f"phantom(seed={spec.seed})"),
    )


def phantom_rois(spec: PhantomSpec) -> ROISet:
    """Standard ROIs for the deterministic phantom bands: background in the
    dark top band, foreground/homogeneous in the bright layer.

    The bright-band ROI stops above 0.45*size because vessel ellipses
    (centers >= 0.55*size, radii <= size/10) can reach up to that row."""
    n = spec.size
    m = max(2, n // 16)
    background = Rect(m, m, n // 4 - 2 * m, n - 2 * m)
    bright_h = max(2, int(0.45 * n) - (n // 4 + m))
    bright = Rect(n // 4 + m, m, bright_h, n - 2 * m)
    return ROISet(background=(background,), foreground=(bright,), homogeneous=(bright,))


# ---------------------------------------------------------------------------
# image and volume files
# ---------------------------------------------------------------------------

def write_raw(path, img: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(img, dtype="<f4"))
    header = json.dumps(
        {"format": _RAW_FORMAT, "shape": list(arr.shape), "dtype": "<f4"}
    ).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(arr.tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        (hlen,) = struct.unpack_from("<I", blob, 0)
        header = json.loads(blob[4 : 4 + hlen])
        if header.get("format") != _RAW_FORMAT:
            raise ValueError("wrong format tag")
        arr = np.frombuffer(blob[4 + hlen :], dtype=header["dtype"])
        return arr.reshape(header["shape"]).copy()
    except (ValueError, KeyError, struct.error) as exc:
        raise DataFormatError(f"{path} is not a raw image container: {exc}") from None


def _write_png16(path, img: np.ndarray) -> None:
    lo, hi = float(np.min(img)), float(np.max(img))
    if lo < -1.0 - _PNG_TOL or hi > 1.0 + _PNG_TOL:
        raise ConfigError(
            f"PNG output expects a normalized [-1, 1] image, got range [{lo:.4g}, {hi:.4g}]"
        )
    u16 = np.round((np.clip(img, -1.0, 1.0) + 1.0) * (65535.0 / 2.0)).astype(np.uint16)
    PILImage.fromarray(u16).save(path, format="PNG")


def _read_png16(path) -> np.ndarray:
    with PILImage.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim != 2:
        raise DataFormatError(f"{path}: expected single-channel grayscale, got shape {arr.shape}")
    scale = 65535.0 if arr.dtype.itemsize >= 2 else 255.0
    return (arr.astype(np.float32) / scale) * 2.0 - 1.0


def save_image(img: np.ndarray, path) -> None:
    """Write one image; the format follows the file suffix
    (.rawf, .png, .tif/.tiff)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ShapeMismatchError(f"expected a 2-D image, got shape {img.shape}")
    suffix = Path(path).suffix.lower()
    if suffix == ".rawf":
        write_raw(path, img)
    elif suffix == ".png":
        _write_png16(path, img)
    elif suffix in (".tif", ".tiff"):
        tifffile.imwrite(path, img.astype(np.float32))
    else:
        raise ConfigError(f"unsupported image suffix {suffix!r} in {path}")


def load_image(path) -> np.ndarray:
    suffix = Path(path).suffix.lower()
    if suffix == ".rawf":
        return read_raw(path)
    if suffix == ".png":
        return _read_png16(path)
    if suffix in (".tif", ".tiff"):
        arr = tifffile.imread(path)
        if arr.ndim != 2:
            raise DataFormatError(f"{path}: expected one page, got shape {arr.shape}")
        return np.asarray(arr, dtype=np.float32)
    raise ConfigError(f"unsupported image suffix {suffix!r} in {path}")


_VOLUME_SUFFIXES = (".rawf", ".png", ".tif", ".tiff")


def save_volume(volume: Volume, path, suffix: str = ".rawf") -> None:
    """Write a volume either as one multi-page TIFF or as a directory of
    zero-padded slice files plus a volume.json with the metadata."""
    path = Path(path)
    if path.suffix.lower() in (".tif", ".tiff"):
        tifffile.imwrite(
            path, np.asarray(volume.slices, dtype=np.float32), photometric="minisblack"
        )
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, sl in enumerate(volume.slices):
        save_image(sl, path / f"slice_{i:04d}{suffix}")
    meta = {
        "repeats_per_location": volume.repeats_per_location,
        "snr_label": volume.snr_label,
    }
    (path / "volume.json").write_text(json.dumps(meta, indent=1))


def load_volume(path, repeats_per_location: int | None = None,
                snr_label: str | None = None) -> Volume:
    """Read a volume from a multi-page TIFF or a directory of slice files.

    Directory slices are taken in lexicographic filename order (hence the
    zero-padded names the writer produces).
    """
    path = Path(path)
    if path.is_file() and path.suffix.lower() in (".tif", ".tiff"):
        stack = np.asarray(tifffile.imread(path), dtype=np.float32)
        if stack.ndim == 2:
            stack = stack[None]
        return Volume(stack, repeats_per_location or 1, snr_label, str(path))
    if not path.is_dir():
        raise DataFormatError(f"{path} is neither a volume directory nor a TIFF stack")

    meta = {}
    meta_path = path / "volume.json"
    if meta_path.exists():
        meta = json.loads(meta_path.read_text())
    files = sorted(
        p for p in path.iterdir() if p.suffix.lower() in _VOLUME_SUFFIXES
    )
    if not files:
        raise DataFormatError(f"{path} contains no readable slices")
    slices = [load_image(p) for p in files]
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise DataFormatError(f"{path}: inconsistent slice shapes {sorted(shapes)}")
    return Volume(
        np.stack(slices),
        repeats_per_location or meta.get("repeats_per_location", 1),
        snr_label if snr_label is not None else meta.get("snr_label"),
        str(path),
    )


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=1))


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path} is not a JSON manifest: {exc}") from None
    if not isinstance(manifest, dict) or "items" not in manifest:
        raise DataFormatError(f"{path} has no 'items' list")
    return manifest


def resolve_item_path(manifest_path, relative) -> Path:
    return (Path(manifest_path).parent / relative).resolve()


def load_references(manifest_path) -> list[np.ndarray]:
    """Training inputs: the fused reference image of every manifest item."""
    manifest = read_manifest(manifest_path)
    refs = []
    for item in manifest["items"]:
        if "reference" not in item:
            raise ConfigError(
                f"item {item.get('name', '?')} has no fused reference yet; "
                "run the selffuse stage first"
            )
        refs.append(load_image(resolve_item_path(manifest_path, item["reference"])))
    return refs
