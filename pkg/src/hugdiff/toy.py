"""Synthetic desk-scale scenes: textured ellipsoids seen from an orbit of cameras."""
from __future__ import annotations

import math

import numpy as np
import torch

from .camera import orbit_cameras
from .conditioning import BodyPrior, segment_parts
from .proxygt import SceneCapture
from .surface import Mesh, ellipsoid_mesh, render_surface, surface_splats


def fibonacci_sphere(m: int) -> np.ndarray:
    i = np.arange(m) + 0.5
    y = 1 - 2 * i / m
    r = np.sqrt(1 - y * y)
    phi = math.pi * (3 - math.sqrt(5)) * i
    return np.stack([r * np.sin(phi), y, r * np.cos(phi)], 1)


def smooth_texture(rng: np.random.Generator, n_waves: int = 3, amplitude: float = 0.25):
    """Random low-frequency colour field over unit directions."""
    base = rng.uniform(0.3, 0.7, size=3)
    dirs = rng.normal(size=(n_waves, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    freq = rng.uniform(1.0, 2.5, size=n_waves)
    phase = rng.uniform(0, 2 * math.pi, size=(n_waves, 3))
    amp = rng.uniform(0.5, 1.0, size=(n_waves, 3)) * amplitude / n_waves * 2

    def color(unit):
        proj = unit @ dirs.T * freq                     # (V, n_waves)
        waves = np.sin(proj[:, :, None] + phase[None])  # (V, n_waves, 3)
        return base + (waves * amp[None]).sum(1)

    return color


def toy_body_prior(radii, center, m: int = 256, jitter: float = 0.0, seed: int = 0) -> BodyPrior:
    """Coarse template shared across scenes: the same unit directions scaled by each scene's radii."""
    unit = fibonacci_sphere(m)
    pts = unit * np.asarray(radii) + np.asarray(center)
    if jitter:
        pts = pts + np.random.default_rng(seed).normal(scale=jitter, size=pts.shape)
    return BodyPrior(pts, segment_parts(unit, "y"), "y")


def toy_scene(index: int, n_views: int = 8, resolution: int = 64, seed: int = 0, cam_radius: float = 1.6,
              n_lat: int = 24, n_lon: int = 48) -> SceneCapture:
    rng = np.random.default_rng([seed, index])
    radii = rng.uniform(0.25, 0.4, size=3)
    radii[1] = rng.uniform(0.35, 0.5)
    mesh = ellipsoid_mesh(radii, (0.0, 0.0, 0.0), n_lat, n_lon, smooth_texture(rng))
    cams = orbit_cameras(n_views, cam_radius, resolution)
    splats = surface_splats(mesh)
    images = torch.stack([render_surface(mesh, c, splats).rgb for c in cams])
    return SceneCapture(f"toy{index:03d}", cams, images, mesh, toy_body_prior(radii, (0.0, 0.0, 0.0)))


def toy_dataset(n_scenes: int = 2, **kw) -> list:
    return [toy_scene(i, **kw) for i in range(n_scenes)]


def textured_sphere(n_views: int = 8, resolution: int = 64, radius: float = 0.4, seed: int = 0) -> SceneCapture:
    rng = np.random.default_rng(seed)
    mesh = ellipsoid_mesh((radius,) * 3, (0.0, 0.0, 0.0), 24, 48, smooth_texture(rng))
    cams = orbit_cameras(n_views, 1.6, resolution)
    splats = surface_splats(mesh)
    images = torch.stack([render_surface(mesh, c, splats).rgb for c in cams])
    return SceneCapture("sphere", cams, images, mesh, toy_body_prior((radius,) * 3, (0.0, 0.0, 0.0)))


def mesh_of(scene: SceneCapture) -> Mesh:
    return scene.surface
