"""Command-line entry point.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 training or sampling divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import errors
from .camera import load_cameras
from .config import CLI_MODES, load_config
from .data import ingest_dataset, ingest_scene, read_depth, read_image, write_dataset, write_image
from .gaussians import export_ply, load_set, save_set
from .proxygt import build_proxy, distribution_stats, load_records, save_records, write_stats

log = logging.getLogger("hugdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

DATA_ERRORS = (errors.IngestError, errors.FormatError, errors.ShapeError, errors.InvalidAttribute,
               errors.EmptySurface, errors.EmptyDepth, errors.MissingBackView, errors.MissingCondition,
               errors.InsufficientPoints, errors.NormalizationError, FileNotFoundError)
DIVERGENCE = (errors.TrainingDiverged, errors.SamplingDiverged)


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, errors.StageError):
        return exit_code(exc.cause)
    if isinstance(exc, (errors.ConfigError, errors.ScheduleError)):
        return EXIT_CONFIG
    if isinstance(exc, DIVERGENCE):
        return EXIT_DIVERGED
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    return 1


def cmd_toy_data(args) -> int:
    from .toy import toy_dataset
    scenes = toy_dataset(args.scenes, n_views=args.views, resolution=args.resolution, seed=args.seed)
    write_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def _scenes(cfg):
    return ingest_dataset(cfg.dataset, cfg.scenes)


def cmd_build_proxy(args) -> int:
    cfg = load_config(args.config)
    scenes = _scenes(cfg)
    out = cfg.proxy_dir
    existing = None
    if args.stage == "2":
        existing = load_records(out, [s.scene_id for s in scenes])
    records = build_proxy(scenes, cfg.proxy_config(1), "1", existing=existing) if args.stage in ("1", "all") \
        else existing
    if args.stage in ("2", "all"):
        records = build_proxy(scenes, cfg.proxy_config(2), "2", existing=records)
    save_records(records, out)
    report = {"config_hash": cfg.hash(), "stage1": distribution_stats([r.stage1_set for r in records])
              if len(records) > 1 else None}
    if records and records[0].unified_set is not None and len(records) > 1:
        report["unified"] = distribution_stats([r.unified_set for r in records])
    write_stats(report, out / "stats.json")
    print(f"proxy ground truth for {len(records)} scenes in {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .pipeline import run_eval, run_training
    cfg = load_config(args.config)
    if args.mode:
        cfg.training_mode = CLI_MODES[args.mode]
    scenes = _scenes(cfg)
    records = None
    if cfg.training_mode != "pixel" or cfg.eval_positions == "proxy":
        if not cfg.proxy_dir.is_dir():
            raise errors.ConfigError(f"{cfg.training_mode} needs proxy ground truth in {cfg.proxy_dir}; "
                                     "run build-proxy first")
        records = load_records(cfg.proxy_dir, [s.scene_id for s in scenes])
    result = run_training(cfg, scenes, records, cfg.output_dir)
    report = run_eval(result.checkpoint, scenes, records, out_dir=cfg.output_dir)
    print(f"checkpoint {result.checkpoint}  final loss {result.final_loss:.6f}  config {result.config_hash}")
    print(report.table())
    return EXIT_OK


def _camera(path, view: int):
    cams = load_cameras(path)
    if not 0 <= view < len(cams):
        raise errors.IngestError(f"camera index {view} not in file with {len(cams)} cameras", path)
    return cams[view]


def cmd_infer(args) -> int:
    from .diffusion import DiffusionModels, infer_full
    from .pipeline import load_model
    model = load_model(args.ckpt)
    if model.mode != "attribute_diffusion":
        raise errors.ConfigError("infer needs an attribute_diffusion checkpoint")
    cam = _camera(args.camera, args.view)
    image = read_image(args.image)
    if tuple(image.shape[:2]) != (cam.height, cam.width):
        raise errors.IngestError("image does not match camera resolution", args.image)
    scene = ingest_scene(args.scene) if args.scene else None
    prior = getattr(scene, "body_prior", None)
    if prior is None:
        raise errors.IngestError("inference needs a body prior (scene directory with body_prior.json)", args.scene)
    depth = read_depth(args.depth) if args.depth else None
    cfg = model.cfg
    dm = DiffusionModels(model.modules["diffuser"], model.modules["head"], model.schedule, cfg.sh_degree,
                         cfg.scale_max)
    seed = cfg.sample_seed if args.seed is None else args.seed
    attrs = infer_full(image, cam, dm, prior, cfg.n_points, depth=depth, scene=scene, seed=seed)
    save_set(attrs, args.out)
    if args.ply:
        export_ply(attrs, args.ply)
    print(f"wrote {len(attrs)} Gaussians to {args.out}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import render
    attrs = load_set(args.set)
    cams = load_cameras(args.camera)
    views = range(len(cams)) if args.view is None else [args.view]
    out = Path(args.out)
    for k in views:
        if not 0 <= k < len(cams):
            raise errors.IngestError(f"camera index {k} out of range", args.camera)
        with torch.no_grad():
            img = render(attrs, cams[k]).rgb
        path = out if args.view is not None and out.suffix == ".png" else out / f"view_{k:03d}.png"
        write_image(img, path)
    print(f"rendered {len(list(views))} view(s) to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pipeline import load_model, run_eval
    model = load_model(args.ckpt)
    scenes = ingest_dataset(args.dataset)
    records = load_records(args.proxy, [s.scene_id for s in scenes]) if args.proxy else None
    views = None if args.views is None else [int(v) for v in args.views.split(",") if v.strip()]
    positions = args.positions or ("proxy" if records else "depth")
    report = run_eval(model, scenes, records, views, out_dir=args.out, positions=positions)
    print(report.table())
    return EXIT_OK


def cmd_stats(args) -> int:
    sets = [load_set(p) for p in args.sets]
    report = distribution_stats(sets)
    write_stats(report, args.out, sets if args.hist else None, args.hist)
    print(json.dumps(report["across_scene"]["sh_coeffs"], indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hugdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy-data", help="write a synthetic textured-ellipsoid dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--scenes", type=int, default=4)
    s.add_argument("--views", type=int, default=8)
    s.add_argument("--resolution", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_toy_data)

    s = sub.add_parser("build-proxy", help="fit proxy ground-truth attribute sets")
    s.add_argument("--config", required=True)
    s.add_argument("--stage", choices=("1", "2", "all"), default="all")
    s.set_defaults(fn=cmd_build_proxy)

    s = sub.add_parser("train", help="train a single-view model")
    s.add_argument("--config", required=True)
    s.add_argument("--mode", choices=tuple(CLI_MODES))
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", help="single image to attribute set")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--view", type=int, default=0, help="camera index inside the camera file")
    s.add_argument("--scene", help="scene directory supplying body prior, surface and back view")
    s.add_argument("--depth", help="depth map (16-bit PNG in mm or float32 binary)")
    s.add_argument("--seed", type=int)
    s.add_argument("--ply", help="also export a PLY point cloud of Gaussians")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("render", help="render an attribute set")
    s.add_argument("--set", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--view", type=int)
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset", required=True)
    s.add_argument("--views", help="comma-separated view indices (default: all but the input view)")
    s.add_argument("--proxy", help="proxy ground-truth directory for proxy positions")
    s.add_argument("--positions", choices=("proxy", "depth"))
    s.add_argument("--out", default="eval")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("stats", help="attribute distribution statistics over sets")
    s.add_argument("--sets", nargs="+", required=True)
    s.add_argument("--out", default="stats.json")
    s.add_argument("--hist", help="directory for histogram plots")
    s.set_defaults(fn=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = exit_code(exc)
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
