"""On-disk dataset layout, image/depth IO and ingestion.

    <root>/scenes/<id>/cameras.json
    <root>/scenes/<id>/images/view_000.png ...
    <root>/scenes/<id>/surface.obj | surface.ply
    <root>/scenes/<id>/body_prior.json      (optional)
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .camera import load_cameras, save_cameras
from .conditioning import load_body_prior, save_body_prior
from .errors import EmptySurface, FormatError, IngestError, ShapeError
from .proxygt import SceneCapture
from .surface import Mesh, load_surface, save_obj, save_ply_points

_DEPTH_HEADER = struct.Struct("<4sII")
_DEPTH_MAGIC = b"DPF4"


def read_image(path) -> torch.Tensor:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def write_image(img, path) -> None:
    arr = img.detach().cpu().numpy() if hasattr(img, "detach") else np.asarray(img)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def write_depth(depth, path) -> None:
    """16-bit PNG in millimetres for .png paths, otherwise a float32 binary with a (H, W) header."""
    depth = np.asarray(depth, dtype=np.float64)
    path = Path(path)
    if path.suffix.lower() == ".png":
        mm = np.clip(np.round(depth * 1000.0), 0, 65535).astype(np.uint16)
        Image.fromarray(mm).save(path)
        return
    h, w = depth.shape
    path.write_bytes(_DEPTH_HEADER.pack(_DEPTH_MAGIC, h, w) + depth.astype("<f4").tobytes())


def read_depth(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            return np.asarray(im, dtype=np.float64) / 1000.0
    data = path.read_bytes()
    if len(data) < _DEPTH_HEADER.size:
        raise FormatError("truncated depth header", len(data))
    magic, h, w = _DEPTH_HEADER.unpack_from(data)
    if magic != _DEPTH_MAGIC:
        raise FormatError("bad depth magic", 0)
    if len(data) != _DEPTH_HEADER.size + 4 * h * w:
        raise FormatError("depth payload size mismatch", len(data))
    return np.frombuffer(data, dtype="<f4", offset=_DEPTH_HEADER.size).reshape(h, w).astype(np.float64)


def write_scene(scene: SceneCapture, root) -> Path:
    d = Path(root) / "scenes" / scene.scene_id
    (d / "images").mkdir(parents=True, exist_ok=True)
    save_cameras(scene.views, d / "cameras.json")
    for k in range(len(scene.views)):
        write_image(scene.images[k], d / "images" / f"view_{k:03d}.png")
    if isinstance(scene.surface, Mesh):
        save_obj(scene.surface, d / "surface.obj")
    else:
        save_ply_points(scene.surface, d / "surface.ply")
    if scene.body_prior is not None:
        save_body_prior(scene.body_prior, d / "body_prior.json")
    return d


def write_dataset(scenes: list, root) -> Path:
    root = Path(root)
    for s in scenes:
        write_scene(s, root)
    return root


def scene_dirs(root) -> list:
    base = Path(root) / "scenes"
    if not base.is_dir():
        raise IngestError("missing scenes/ directory", base)
    return sorted(p for p in base.iterdir() if p.is_dir())


def ingest_scene(d: Path) -> SceneCapture:
    d = Path(d)
    cams = load_cameras(d / "cameras.json")
    images = []
    for k, cam in enumerate(cams):
        p = d / "images" / f"view_{k:03d}.png"
        if not p.exists():
            raise IngestError(f"view {k}: image missing", p)
        try:
            img = read_image(p)
        except OSError as exc:
            raise IngestError(f"view {k}: unreadable image ({exc})", p) from exc
        if tuple(img.shape[:2]) != (cam.height, cam.width):
            raise IngestError(f"view {k}: image is {img.shape[1]}x{img.shape[0]}, camera expects "
                              f"{cam.width}x{cam.height}", p)
        images.append(img)
    surface_path = next((d / f"surface.{ext}" for ext in ("obj", "ply") if (d / f"surface.{ext}").exists()), None)
    if surface_path is None:
        raise IngestError("surface file missing (surface.obj or surface.ply)", d)
    try:
        surface = load_surface(surface_path)
    except (OSError, ValueError, FormatError, EmptySurface) as exc:
        raise IngestError(f"unreadable surface ({exc})", surface_path) from exc
    prior_path = d / "body_prior.json"
    prior = load_body_prior(prior_path) if prior_path.exists() else None
    try:
        return SceneCapture(d.name, cams, torch.stack(images), surface, prior)
    except ShapeError as exc:
        raise IngestError(str(exc), d) from exc


def ingest_dataset(root, scene_ids: list | None = None) -> list:
    dirs = scene_dirs(root)
    if scene_ids is not None:
        by_name = {p.name: p for p in dirs}
        missing = [s for s in scene_ids if s not in by_name]
        if missing:
            raise IngestError(f"scenes not found: {missing}", Path(root) / "scenes")
        dirs = [by_name[s] for s in scene_ids]
    return [ingest_scene(d) for d in dirs]


def write_manifest(root, info: dict) -> None:
    Path(root, "dataset.json").write_text(json.dumps(info, indent=1))
