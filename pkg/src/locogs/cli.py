"""``locogs`` command-line interface.

Every subcommand prints machine-readable JSON on stdout (progress as one JSON
object per line, the result last).  Failures print ``{"error": ..., "message": ...}``
on stderr and exit with status 1; usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("locogs")

PRESETS = ("base", "small")


def _emit(obj) -> None:
    print(json.dumps(obj, default=_json_default), flush=True)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _field_config(args, scene):
    from .field import HashGridConfig

    lo, hi = scene.bounds
    center = tuple(float(c) for c in (lo.astype(np.float64) + hi) / 2)
    radius = float(max(np.max(hi - lo) / 2, 1e-3)) if len(scene) else 1.0
    overrides = {k: getattr(args, k) for k in ("levels", "min_res", "max_res", "table_size_log2")
                 if getattr(args, k, None) is not None}
    return HashGridConfig.preset(args.preset, center=center, radius=radius, **overrides)


def _train_config(args, **extra):
    from .train import TrainConfig

    keys = ("iterations", "warmup_iters", "seed", "batch_size", "lam_mask", "prune_every", "field_lr_init",
            "field_lr_final")
    overrides = {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}
    return TrainConfig.preset(args.preset, **{**overrides, **extra})


def _cameras(args):
    from .render import Camera
    from .synthetic import orbit_cameras

    if getattr(args, "cameras", None):
        data = json.loads(Path(args.cameras).read_text())
        return [Camera.from_dict(c) for c in (data if isinstance(data, list) else [data])]
    return orbit_cameras(args.orbit, radius=args.orbit_radius, size=args.size)


# ---- subcommands ------------------------------------------------------------------

def cmd_analyze(args) -> dict:
    from .coherence import coherence_report
    from .model import load_ply

    scene = load_ply(args.scene)
    report = coherence_report(scene, args.thresholds, n=args.pairs, seed=args.seed, bins=args.bins)
    if args.json:
        Path(args.json).write_text(report.to_json())
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    from .coherence import ATTRIBUTES

    return {"thresholds": report.thresholds, "pair_counts": report.pair_counts,
            "means": {a: report.means(a).tolist() for a in ATTRIBUTES}}


def cmd_distill(args) -> dict:
    from .field import HashGridField, materialize
    from .model import ExplicitSet, load_ply
    from .train import distill, save_checkpoint

    scene = load_ply(args.scene)
    config = _train_config(args)
    field = HashGridField(_field_config(args, scene), seed=config.seed)
    result = distill(scene, field, config=config, log_fn=_emit, log_every=args.log_every)
    explicit = ExplicitSet.from_scene(scene)
    save_checkpoint(args.output, materialize(explicit, field), field, result.masks, config, explicit=explicit)
    return {"checkpoint": str(args.output), "gaussians": len(scene), "rmse": result.rmse}


def cmd_train(args) -> dict:
    import torch

    from .model import load_point_cloud, load_ply, scene_from_points
    from .render import Camera, load_png
    from .train import View, save_checkpoint, train_e2e

    spec = json.loads(Path(args.views).read_text())
    base = Path(args.views).parent
    views = [View(load_png(base / v["image"]), Camera.from_dict(v["camera"])) for v in spec]
    try:
        init = load_ply(args.init)
    except Exception:
        init = scene_from_points(*load_point_cloud(args.init))
    config = _train_config(args, densify=args.densify)
    result = train_e2e(views, init, config, field_config=_field_config(args, init), dtype=torch.float32,
                       log_fn=_emit, log_every=args.log_every)
    save_checkpoint(args.output, result.scene, result.field, result.masks, config, explicit=result.explicit)
    return {"checkpoint": str(args.output), "gaussians": len(result.scene), "survivors": result.survivors,
            "final_loss": result.history[-1]["total"] if result.history else None}


def cmd_densify(args) -> dict:
    from .densify import DensityField, sample_dense_points
    from .model import save_point_cloud

    builders = {
        "plane": lambda: DensityField.opaque_plane(args.position, axis=args.axis),
        "slab": lambda: DensityField.constant_slab(args.sigma, args.position, args.position + args.thickness, args.axis),
        "shell": lambda: DensityField.sphere_shell(sigma=args.sigma),
        "gradient": lambda: DensityField.axis_gradient(args.axis, slope=args.sigma),
    }
    cloud = sample_dense_points(builders[args.field](), _cameras(args), args.rays, seed=args.seed, near=args.near,
                                far=args.far, n_samples=args.samples)
    save_point_cloud(args.output, cloud.positions, cloud.colors)
    return {"points": len(cloud), "rays": args.rays, "output": str(args.output)}


def _load_for_encode(args):
    from .field import load_field
    from .model import ExplicitSet, load_ply
    from .train import load_checkpoint

    if args.checkpoint:
        ck = load_checkpoint(args.checkpoint)
        return ck.explicit, ck.field
    if not (args.scene and args.field):
        raise ValueError("encode needs a checkpoint directory or both --scene and --field")
    return ExplicitSet.from_scene(load_ply(args.scene)), load_field(args.field)


def cmd_encode(args) -> dict:
    from .codec import EncodeOptions, encode_scene, save_container, storage_stats

    explicit, field = _load_for_encode(args)
    comp = encode_scene(explicit, field, EncodeOptions(args.scale_bits, args.color_bits, args.hash_bits))
    size = save_container(comp, args.output)
    return {"output": str(args.output), "bytes": size, "gaussians": len(explicit), "storage": storage_stats(comp)}


def cmd_decode(args) -> dict:
    from .codec import decode_scene, load_container
    from .field import save_field
    from .model import save_ply

    dec = decode_scene(load_container(args.input))
    save_ply(dec.scene, args.output)
    if args.field_out and dec.field is not None:
        save_field(dec.field, args.field_out)
    return {"output": str(args.output), "gaussians": len(dec.scene)}


def cmd_render(args) -> dict:
    from .codec import decode_scene, load_container
    from .model import load_ply
    from .render import load_png, psnr, render, save_png, ssim

    path = Path(args.input)
    scene = decode_scene(load_container(path)).scene if path.suffix == ".locogs" else load_ply(path)
    cams = _cameras(args)
    cam = cams[args.view % len(cams)]
    img = render(scene, cam, background=args.background)
    save_png(img, args.output)
    out = {"output": str(args.output), "width": cam.width, "height": cam.height}
    if args.reference:
        ref = load_png(args.reference)
        quantized = np.clip(np.round(img.detach().numpy() * 255), 0, 255) / 255
        p = psnr(quantized, ref)
        out["psnr"] = p if np.isfinite(p) else "inf"
        out["ssim"] = ssim(quantized, ref)
    return out


def cmd_stats(args) -> dict:
    from .codec import load_container, storage_stats

    comp = load_container(args.input)
    size = Path(args.input).stat().st_size
    return {"storage": storage_stats(comp), "container_bytes": size, "header_bytes": comp.header_size(),
            "gaussians": comp.header["count"], "unit": "bytes"}


# ---- parser -------------------------------------------------------------------------

def _add_field_opts(p):
    p.add_argument("--preset", choices=PRESETS, default="base", help="hash-table size and mask weight preset")
    p.add_argument("--levels", type=int)
    p.add_argument("--min-res", dest="min_res", type=int)
    p.add_argument("--max-res", dest="max_res", type=int)
    p.add_argument("--table-size-log2", dest="table_size_log2", type=int)
    p.add_argument("--iterations", type=int)
    p.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--field-lr-init", dest="field_lr_init", type=float)
    p.add_argument("--field-lr-final", dest="field_lr_final", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", dest="log_every", type=int, default=100)


def _add_camera_opts(p):
    p.add_argument("--cameras", help="JSON file with one camera or a list of cameras")
    p.add_argument("--orbit", type=int, default=8, help="number of orbit cameras when --cameras is absent")
    p.add_argument("--orbit-radius", dest="orbit_radius", type=float, default=3.0)
    p.add_argument("--size", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="locogs", description="Gaussian-splat scene compression toolkit")
    parser.add_argument("--config", help="JSON file of option defaults (CLI flags win)")
    parser.add_argument("--threads", type=int, default=1, help="worker threads; 1 is bitwise deterministic")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("analyze", help="local-coherence statistics of a splat PLY")
    p.add_argument("scene")
    p.add_argument("--thresholds", type=float, nargs="+")
    p.add_argument("--pairs", type=int, default=100_000)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json")
    p.add_argument("--csv")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("distill", help="fit a field to a scene's implicit attributes")
    p.add_argument("scene")
    p.add_argument("-o", "--output", required=True, help="checkpoint directory")
    _add_field_opts(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("train", help="toy photometric training from images and cameras")
    p.add_argument("--views", required=True, help="JSON list of {image, camera}")
    p.add_argument("--init", required=True, help="splat PLY or colored point cloud PLY")
    p.add_argument("-o", "--output", required=True, help="checkpoint directory")
    p.add_argument("--lam-mask", dest="lam_mask", type=float)
    p.add_argument("--prune-every", dest="prune_every", type=int)
    p.add_argument("--densify", action="store_true")
    _add_field_opts(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("densify", help="dense point cloud from an analytic density field")
    p.add_argument("--field", choices=("plane", "slab", "shell", "gradient"), default="shell")
    p.add_argument("--position", type=float, default=0.0)
    p.add_argument("--thickness", type=float, default=0.5)
    p.add_argument("--axis", type=int, default=2)
    p.add_argument("--sigma", type=float, default=20.0)
    p.add_argument("--rays", type=int, default=10_000)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--near", type=float, default=0.05)
    p.add_argument("--far", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    _add_camera_opts(p)
    p.set_defaults(func=cmd_densify)

    p = sub.add_parser("encode", help="compress a checkpoint into a .locogs container")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--scene")
    p.add_argument("--field")
    p.add_argument("--scale-bits", dest="scale_bits", type=int, default=6)
    p.add_argument("--color-bits", dest="color_bits", type=int, default=8)
    p.add_argument("--hash-bits", dest="hash_bits", type=int, default=6)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decompress a .locogs container to a splat PLY")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--field-out", dest="field_out")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render a PLY or .locogs scene to PNG")
    p.add_argument("input")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.add_argument("--reference", help="PNG to compare against; adds PSNR/SSIM to the output")
    _add_camera_opts(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("stats", help="storage size per category of a .locogs container")
    p.add_argument("input")
    p.set_defaults(func=cmd_stats)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return
    data = json.loads(Path(known.config).read_text())
    for action in parser._subparsers._group_actions:
        for name, sp in action.choices.items():
            sp.set_defaults(**{k.replace("-", "_"): v for k, v in {**data, **data.get(name, {})}.items()
                               if not isinstance(v, dict)})


def _set_threads(n: int) -> None:
    # the entropy coder is sequential, so torch is the only thread pool to size
    import torch

    torch.set_num_threads(max(1, n))


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=os.environ.get("LOCOGS_LOG_LEVEL", "WARNING").upper(), stream=sys.stderr)
    parser = build_parser()
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        _apply_config(parser, argv)
    except (OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    args = parser.parse_args(argv)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        return 2
    try:
        _set_threads(args.threads)
        _emit(args.func(args))
    except Exception as exc:  # every failure becomes a JSON error record
        log.debug("command failed", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
