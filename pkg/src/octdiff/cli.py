"""Operator entry point: synth -> selffuse -> train -> denoise/sweep -> eval.

Every subcommand takes its randomness from --seed, never mutates its inputs,
and exits 0 on success, 2 on bad inputs or flags, 1 on runtime failures.  On
failure the last stderr line is a machine-readable JSON object
{"error": ..., "message": ...}.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    ShapeMismatchError,
)
from .fusion import FusionConfig, fuse, fuse_volume
from .metrics import MetricsReport, ROISet, evaluate_pair, paired_t_test
from .model import NetworkConfig
from .sampling import denoise, sweep_t
from .training import TrainConfig, train

REGISTER_CMD_ENV = "OCTDIFF_REGISTER_CMD"

_USAGE_ERRORS = (
    ConfigError,
    DataFormatError,
    DegenerateInputError,
    ShapeMismatchError,
    FileNotFoundError,
    NotADirectoryError,
    IndexError,
    KeyError,
)


def _to_unit(img: np.ndarray) -> np.ndarray:
    """Map the normalized [-1, 1] range onto [0, 1] for metric reporting."""
    return (np.asarray(img, dtype=np.float64) + 1.0) / 2.0


def _load_normalized(path) -> np.ndarray:
    """Load an image, normalizing only when it is not already in [-1, 1]
    (so re-saving an already-normalized image is byte-exact)."""
    img = data.load_image(path)
    if float(img.min()) < -1.0 - 1e-6 or float(img.max()) > 1.0 + 1e-6:
        print(f"note: normalizing {path} to [-1, 1]", file=sys.stderr)
        img = data.normalize(img)
    return img


_MANIFEST_PATH_KEYS = ("clean", "noisy", "reference", "denoised")


def _write_manifest_at(manifest: dict, old_root: Path, out_path: Path) -> None:
    """Write a manifest, rewriting its relative paths when the output lives
    in a different directory than the dataset it points into."""
    new_root = out_path.parent
    if new_root.resolve() != old_root.resolve():
        def rebase(rel):
            return os.path.relpath(old_root / rel, new_root)

        manifest = json.loads(json.dumps(manifest))
        if manifest.get("rois"):
            manifest["rois"] = rebase(manifest["rois"])
        for item in manifest["items"]:
            for key in _MANIFEST_PATH_KEYS:
                if key in item:
                    item[key] = rebase(item[key])
            if "slices" in item:
                item["slices"] = [rebase(rel) for rel in item["slices"]]
    data.write_manifest(out_path, manifest)


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = data.PhantomSpec(
        size=args.size,
        n_layers=args.layers,
        n_vessels=args.vessels,
        speckle=args.speckle,
        gamma_shape=args.gamma_shape,
        gaussian_sigma=args.gaussian_sigma,
        seed=args.seed,
    )
    target = args.slices // 2
    items = []
    for i in range(args.count):
        name = f"phantom_{i:03d}"
        item_spec = data.PhantomSpec(**{**spec.to_dict(), "seed": args.seed + i})
        clean_raw, slices_raw = data.make_phantom_volume_raw(item_spec, n_slices=args.slices)
        item_dir = out / name
        item_dir.mkdir(exist_ok=True)
        data.write_raw(item_dir / "clean.rawf", data.normalize(clean_raw))
        slice_paths = []
        for j, sl in enumerate(slices_raw):
            rel = f"{name}/slice_{j:03d}.rawf"
            data.write_raw(out / rel, data.normalize(sl))
            slice_paths.append(rel)
        items.append(
            {
                "name": name,
                "clean": f"{name}/clean.rawf",
                "slices": slice_paths,
                "target_index": target,
                "noisy": slice_paths[target],
                # original intensity bounds, so eval can undo the [-1, 1] map
                "clean_range": list(data.intensity_bounds(clean_raw)),
                "noisy_range": list(data.intensity_bounds(slices_raw[target])),
            }
        )
    data.phantom_rois(spec).save(out / "rois.json")
    manifest = {
        "kind": "octdiff.dataset",
        "seed": args.seed,
        "phantom": spec.to_dict(),
        "rois": "rois.json",
        "items": items,
    }
    data.write_manifest(out / "manifest.json", manifest)
    print(f"wrote {args.count} phantoms to {out} (manifest.json, rois.json)")
    return 0


# ---------------------------------------------------------------------------
# selffuse
# ---------------------------------------------------------------------------

def _fusion_config(args) -> FusionConfig:
    return FusionConfig(
        radius=args.radius,
        weight_bandwidth=args.bandwidth,
        registration_method=args.method,
        max_shift=args.max_shift,
        external_command=args.external_cmd or os.environ.get(REGISTER_CMD_ENV),
    )


def cmd_selffuse(args) -> int:
    config = _fusion_config(args)
    if args.volume:
        if not args.out:
            raise ConfigError("--volume mode needs --out for the fused volume")
        volume = data.load_volume(args.volume)
        fused = fuse_volume(volume, config)
        data.save_volume(fused, args.out)
        print(f"fused {len(fused)} slices -> {args.out}")
        return 0

    manifest_path = Path(args.manifest)
    manifest = data.read_manifest(manifest_path)
    root = manifest_path.parent
    for item in manifest["items"]:
        slices = np.stack(
            [data.load_image(root / rel) for rel in item["slices"]]
        )
        volume = data.Volume(slices)
        fused = fuse(volume, item["target_index"], config)
        rel = f"{item['name']}/fused.rawf"
        data.write_raw(root / rel, fused.astype(np.float32))
        item["reference"] = rel
    out_manifest = Path(args.out) if args.out else manifest_path.with_name("manifest_fused.json")
    _write_manifest_at(manifest, root, out_manifest)
    print(f"fused {len(manifest['items'])} targets -> {out_manifest}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

_TRAIN_FLAG_FIELDS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "initial_lr",
    "lr_halving": "lr_halving_period_epochs",
    "steps": "diffusion_steps",
    "beta_start": "beta_start",
    "beta_end": "beta_end",
    "weighting": "loss_weighting",
    "seed": "seed",
}


def _train_config(args) -> TrainConfig:
    config = TrainConfig.desk() if args.desk else TrainConfig()
    if args.config:
        with open(args.config) as fh:
            raw = json.load(fh)
        known = set(TrainConfig.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)} in {args.config}")
        config = TrainConfig.from_dict({**config.to_dict(), **raw})
    overrides = {
        field: getattr(args, flag)
        for flag, field in _TRAIN_FLAG_FIELDS.items()
        if getattr(args, flag) is not None
    }
    net_overrides = {
        key: getattr(args, key)
        for key in ("base_channels", "depth", "time_embed_dim")
        if getattr(args, key) is not None
    }
    if net_overrides:
        overrides["network"] = NetworkConfig.from_dict(
            {**config.network.to_dict(), **net_overrides}
        )
    return config.override(**overrides) if overrides else config


def cmd_train(args) -> int:
    config = _train_config(args)
    references = data.load_references(args.manifest)
    log_path = Path(args.log) if args.log else Path(args.out).with_suffix(".loss.csv")
    result = train(references, config, log_path=log_path)
    save_checkpoint(result.checkpoint, args.out)
    losses = [row.loss for row in result.history]
    tail = f", final loss {losses[-1]:.4f}" if losses else ""
    print(
        f"trained {config.epochs} epochs on {len(references)} references"
        f"{tail}; checkpoint -> {args.out}, loss log -> {log_path}"
    )
    return 0


# ---------------------------------------------------------------------------
# denoise
# ---------------------------------------------------------------------------

def cmd_denoise(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    sched = ckpt.schedule

    if args.image:
        if not args.out:
            raise ConfigError("--image mode needs --out")
        img = _load_normalized(args.image)
        rng = np.random.default_rng([args.seed, args.t])
        out = denoise(img, args.t, model, sched, rng)
        data.save_image(out.astype(np.float32), args.out)
        print(f"denoised {args.image} at t={args.t} -> {args.out}")
        return 0

    manifest_path = Path(args.manifest)
    manifest = data.read_manifest(manifest_path)
    root = manifest_path.parent
    for index, item in enumerate(manifest["items"]):
        img = _load_normalized(root / item["noisy"])
        # per-item stream: reverse-chain noise stays independent across items
        rng = np.random.default_rng([args.seed, args.t, index])
        out = denoise(img, args.t, model, sched, rng)
        rel = f"{item['name']}/denoised_t{args.t:03d}.rawf"
        data.write_raw(root / rel, out.astype(np.float32))
        item["denoised"] = rel
    out_manifest = Path(args.out) if args.out else manifest_path.with_name("manifest_denoised.json")
    _write_manifest_at(manifest, root, out_manifest)
    print(f"denoised {len(manifest['items'])} images at t={args.t} -> {out_manifest}")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _parse_t_list(text: str) -> list[int]:
    try:
        values = [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigError(f"--t-list must be comma-separated integers, got {text!r}") from None
    if not values:
        raise ConfigError("--t-list is empty")
    return values


def compose_grid(images: list[np.ndarray], separator: int = 2) -> np.ndarray:
    """Stack same-shape images vertically (one row per entry) with white
    separator lines, for side-by-side inspection of a sweep."""
    shapes = {img.shape for img in images}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"grid rows must share a shape, got {sorted(shapes)}")
    h, w = images[0].shape
    rows = []
    for i, img in enumerate(images):
        if i:
            rows.append(np.ones((separator, w), dtype=np.float32))
        rows.append(img.astype(np.float32))
    return np.concatenate(rows, axis=0)


def cmd_sweep(args) -> int:
    t_list = _parse_t_list(args.t_list)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    img = _load_normalized(args.image)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    results = sweep_t(img, t_list, model, ckpt.schedule, args.seed)
    for t, denoised in results:
        data.write_raw(out / f"denoised_t{t:03d}.rawf", denoised.astype(np.float32))
    grid = compose_grid([denoised for _, denoised in results])
    data.save_image(grid, out / "grid.png")
    meta = {
        "image": "grid.png",
        "rows": t_list,
        "cell_shape": list(img.shape),
        "separator": 2,
        "seed": args.seed,
    }
    (out / "grid.json").write_text(json.dumps(meta, indent=1))
    print(f"swept t={t_list} -> {out} (grid.png rows top-to-bottom match --t-list)")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def cmd_eval(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = data.read_manifest(manifest_path)
    root = manifest_path.parent
    rois_path = args.rois or manifest.get("rois")
    if rois_path is None:
        raise ConfigError("no ROI file: pass --rois or add 'rois' to the manifest")
    rois = ROISet.load(root / rois_path if not Path(rois_path).is_absolute() else rois_path)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    if not variants:
        raise ConfigError("--variants is empty")

    reports: dict[str, list[MetricsReport]] = {v: [] for v in variants}
    for item in manifest["items"]:
        # prefer original intensities when the manifest recorded the bounds
        # that normalization collapsed; fall back to a [0, 1] remap otherwise
        original = "clean_range" in item and "noisy_range" in item
        clean = _load_normalized(root / item["clean"])
        clean = data.denormalize(clean, *item["clean_range"]) if original else _to_unit(clean)
        for variant in variants:
            if variant not in item:
                raise ConfigError(f"item {item['name']} has no {variant!r} image")
            img = _load_normalized(root / item[variant])
            img = data.denormalize(img, *item["noisy_range"]) if original else _to_unit(img)
            reports[variant].append(
                evaluate_pair(
                    img, clean, rois,
                    image_id=f"{item['name']}:{variant}",
                    reference_id=item["clean"],
                    domain="original" if original else "unit",
                )
            )

    out_csv = Path(args.out)
    with open(out_csv, "w") as fh:
        fh.write(",".join(MetricsReport.CSV_HEADER) + "\n")
        for variant in variants:
            for report in reports[variant]:
                fh.write(",".join(str(v) for v in report.as_row()) + "\n")

    summary: dict = {"rois": rois.to_dict(), "variants": {}, "paired_t_tests": {}}
    for variant in variants:
        summary["variants"][variant] = {
            metric: {
                "mean": float(np.mean([getattr(r, metric) for r in reports[variant]])),
                "std": float(np.std([getattr(r, metric) for r in reports[variant]], ddof=1))
                if len(reports[variant]) > 1 else 0.0,
            }
            for metric in ("snr", "psnr", "cnr", "enl")
        }
    if len(variants) == 2 and len(manifest["items"]) >= 2:
        a, b = variants
        for metric in ("snr", "psnr", "cnr", "enl"):
            t, p = paired_t_test(
                [getattr(r, metric) for r in reports[b]],
                [getattr(r, metric) for r in reports[a]],
            )
            summary["paired_t_tests"][metric] = {"pair": f"{b} vs {a}", "t": t, "p": p}

    summary_path = Path(args.summary) if args.summary else out_csv.with_suffix(".summary.json")
    summary_path.write_text(json.dumps(summary, indent=1))

    for variant in variants:
        stats = summary["variants"][variant]
        line = ", ".join(
            f"{m}={stats[m]['mean']:.3f}+-{stats[m]['std']:.3f}" for m in ("snr", "psnr", "cnr", "enl")
        )
        print(f"{variant}: {line}")
    for metric, res in summary["paired_t_tests"].items():
        print(f"t-test {metric} ({res['pair']}): t={res['t']:.3f}, p={res['p']:.4g}")
    print(f"rows -> {out_csv}, summary -> {summary_path}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="octdiff",
        description="Unsupervised diffusion-based speckle denoising for b-scans",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic speckle phantom dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--slices", type=int, default=7)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--vessels", type=int, default=2)
    p.add_argument("--speckle", default="gamma_multiplicative",
                   choices=["gamma_multiplicative", "gaussian_additive", "none"])
    p.add_argument("--gamma-shape", type=float, default=2.0)
    p.add_argument("--gaussian-sigma", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selffuse", help="build high-SNR references by neighbor fusion")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--volume")
    p.add_argument("--out", help="output manifest (manifest mode) or volume dir (volume mode)")
    p.add_argument("--radius", type=int, default=3)
    p.add_argument("--method", default="translation", choices=["none", "translation", "external"])
    p.add_argument("--bandwidth", type=float, default=None)
    p.add_argument("--max-shift", type=int, default=10)
    p.add_argument("--external-cmd", default=None,
                   help=f"registration command template (or set ${REGISTER_CMD_ENV})")
    p.set_defaults(func=cmd_selffuse)

    p = sub.add_parser("train", help="train the noise regressor on fused references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", help="flat JSON config file; flags override it")
    p.add_argument("--log", help="loss CSV path (default: <out>.loss.csv)")
    p.add_argument("--desk", action="store_true", help="start from the desk-scale preset")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-halving", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--beta-start", type=float)
    p.add_argument("--beta-end", type=float)
    p.add_argument("--weighting", choices=["simplified", "kl_weighted"])
    p.add_argument("--seed", type=int)
    p.add_argument("--base-channels", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--time-embed-dim", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="run the partial reverse chain on an image or manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t", type=int, required=True, help="starting step (0 = passthrough)")
    p.add_argument("--seed", type=int, default=0)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image")
    src.add_argument("--manifest")
    p.add_argument("--out", help="output image (image mode) or output manifest (manifest mode)")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("sweep", help="denoise one image at several starting steps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--t-list", required=True, help="comma-separated starting steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="metric table and paired t-tests against the clean reference")
    p.add_argument("--manifest", required=True)
    p.add_argument("--rois", help="ROI JSON (default: the manifest's 'rois' entry)")
    p.add_argument("--variants", default="noisy,denoised")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--summary", help="summary JSON path (default: <out>.summary.json)")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
