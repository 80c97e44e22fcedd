"""Pinhole cameras, JSON IO, and helpers to place cameras around a subject."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IngestError, ShapeError

CAMERA_KEYS = ("fx", "fy", "cx", "cy", "w2c", "width", "height", "near", "far")


@dataclass(frozen=True, eq=False)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    world_to_camera: np.ndarray
    width: int
    height: int
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        if w2c.shape != (4, 4):
            raise ShapeError(f"world_to_camera must be 4x4, got {w2c.shape}")
        object.__setattr__(self, "world_to_camera", w2c)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        R = w2c[:3, :3]
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-6 or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation block is not a proper rotation")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("resolution must be positive")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        """World-space optical axis (camera +z)."""
        return self.rotation[2].copy()

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def with_pose(self, w2c) -> "CameraView":
        return CameraView(self.fx, self.fy, self.cx, self.cy, w2c, self.width, self.height,
                          self.near, self.far)

    def scaled(self, factor: float) -> "CameraView":
        return CameraView(self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
                          self.world_to_camera, int(round(self.width * factor)),
                          int(round(self.height * factor)), self.near, self.far)

    def to_dict(self) -> dict:
        return {"fx": float(self.fx), "fy": float(self.fy), "cx": float(self.cx), "cy": float(self.cy),
                "w2c": [float(v) for v in self.world_to_camera.reshape(-1)],
                "width": int(self.width), "height": int(self.height),
                "near": float(self.near), "far": float(self.far)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraView":
        missing = [k for k in CAMERA_KEYS if k not in d]
        if missing:
            raise KeyError(f"camera missing fields {missing}")
        w2c = np.asarray(d["w2c"], dtype=np.float64)
        if w2c.size != 16:
            raise ShapeError("w2c must hold 16 floats")
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]), w2c.reshape(4, 4),
                   int(d["width"]), int(d["height"]), float(d["near"]), float(d["far"]))


def save_cameras(cams, path) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


def load_cameras(path) -> list[CameraView]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IngestError(f"unreadable camera file: {exc}", path) from exc
    if isinstance(raw, dict):
        raw = raw.get("views", [raw])
    cams = []
    for i, d in enumerate(raw):
        try:
            cams.append(CameraView.from_dict(d))
        except (KeyError, ValueError) as exc:
            raise IngestError(f"camera {i}: {exc}", path) from exc
    return cams


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera matrix for a camera at `eye` looking at `target` (OpenCV axes: x right, y down)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, np.array([0.0, 0.0, 1.0]))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ eye
    return w2c


def orbit_cameras(n_views: int, radius: float, resolution: int, fov_deg: float = 40.0,
                  center=(0.0, 0.0, 0.0), elevation_deg: float = 0.0, near=0.05, far=50.0,
                  start_azimuth_deg: float = 0.0) -> list[CameraView]:
    """Cameras evenly spaced in azimuth around the vertical (y) axis; view 0 sits on -z looking at +z."""
    f = 0.5 * resolution / math.tan(math.radians(fov_deg) / 2)
    center = np.asarray(center, dtype=np.float64)
    cams = []
    el = math.radians(elevation_deg)
    for k in range(n_views):
        az = math.radians(start_azimuth_deg) + 2 * math.pi * k / n_views
        eye = center + radius * np.array([math.sin(az) * math.cos(el), -math.sin(el),
                                          -math.cos(az) * math.cos(el)])
        cams.append(CameraView(f, f, resolution / 2, resolution / 2, look_at(eye, center),
                               resolution, resolution, near, far))
    return cams


def rotate_about_vertical(cam: CameraView, pivot, angle: float = math.pi, up_axis: int = 1) -> CameraView:
    """Rigidly rotate the camera by `angle` about the world axis `up_axis` through `pivot`."""
    c, s = math.cos(angle), math.sin(angle)
    if up_axis == 1:
        Rw = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    elif up_axis == 2:
        Rw = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    else:
        Rw = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    pivot = np.asarray(pivot, dtype=np.float64)
    new_center = pivot + Rw @ (cam.center - pivot)
    R = cam.rotation @ Rw.T
    w2c = np.eye(4)
    w2c[:3, :3] = R
    w2c[:3, 3] = -R @ new_center
    return cam.with_pose(w2c)
