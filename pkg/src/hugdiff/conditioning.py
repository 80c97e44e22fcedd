"""Per-point conditioning signals for the attribute networks.

A bundle carries, for every Gaussian position, features sampled from the
input image and a back-view image (plus a visibility flag) and an embedding of
the nearest body-template point: its index, its distance, and its part label.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
import torch.nn.functional as F
from scipy.spatial import cKDTree
from torch import nn

from .camera import CameraView, rotate_about_vertical
from .errors import EmptyDepth, IngestError, MissingBackView, NonFiniteFeatures
from .geometry import farthest_point_sampling, knn
from .setnet import Hierarchy, build_hierarchy
from .surface import render_surface

N_PARTS = 24
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True, eq=False)
class BodyPrior:
    template_points: np.ndarray   # (M, 3)
    part_labels: np.ndarray       # (M,) in [0, n_parts)
    up_axis: str = "y"
    n_parts: int = N_PARTS

    def __post_init__(self):
        pts = np.asarray(self.template_points, dtype=np.float64)
        labels = np.asarray(self.part_labels, dtype=np.int64)
        object.__setattr__(self, "template_points", pts)
        object.__setattr__(self, "part_labels", labels)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(labels) != len(pts):
            raise ValueError("body prior needs M x 3 points and M labels")
        if len(pts) < self.n_parts:
            raise ValueError(f"body prior has {len(pts)} points, fewer than {self.n_parts} parts")
        if labels.min() < 0 or labels.max() >= self.n_parts:
            raise ValueError("part label out of range")
        if self.up_axis not in AXES:
            raise ValueError(f"up_axis must be one of {sorted(AXES)}")

    @property
    def point_indices(self) -> np.ndarray:
        return np.arange(len(self.template_points))

    @property
    def centroid(self) -> np.ndarray:
        return self.template_points.mean(0)

    @property
    def up(self) -> int:
        return AXES[self.up_axis]

    def translated(self, offset) -> "BodyPrior":
        return BodyPrior(self.template_points + np.asarray(offset), self.part_labels, self.up_axis, self.n_parts)

    def to_dict(self) -> dict:
        return {"points": self.template_points.tolist(), "labels": self.part_labels.tolist(),
                "up_axis": self.up_axis}

    @classmethod
    def from_dict(cls, d: dict) -> "BodyPrior":
        return cls(np.asarray(d["points"], float), np.asarray(d["labels"], np.int64), d.get("up_axis", "y"))


def load_body_prior(path) -> BodyPrior:
    try:
        return BodyPrior.from_dict(json.loads(Path(path).read_text()))
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        raise IngestError(f"bad body prior: {exc}", path) from exc


def save_body_prior(prior: BodyPrior, path) -> None:
    Path(path).write_text(json.dumps(prior.to_dict()))


def segment_parts(points, up_axis: str = "y", n_height: int = 6, n_sectors: int = 4) -> np.ndarray:
    """Coarse part labels: height bands times azimuth sectors around the up axis."""
    p = np.asarray(points, dtype=np.float64)
    up = AXES[up_axis]
    h = p[:, up]
    lo, hi = h.min(), h.max()
    band = np.clip(((h - lo) / max(hi - lo, 1e-12) * n_height).astype(int), 0, n_height - 1)
    a, b = [i for i in range(3) if i != up]
    c = p.mean(0)
    az = np.arctan2(p[:, a] - c[a], p[:, b] - c[b])
    sector = np.clip(((az + math.pi) / (2 * math.pi) * n_sectors).astype(int), 0, n_sectors - 1)
    return band * n_sectors + sector


@dataclass(frozen=True, eq=False)
class ConditioningBundle:
    positions: torch.Tensor
    pixel_aligned: torch.Tensor
    body_semantic: torch.Tensor
    visibility: torch.Tensor

    def __post_init__(self):
        n = self.positions.shape[0]
        for name in ("pixel_aligned", "body_semantic", "visibility"):
            if getattr(self, name).shape[0] != n:
                raise ValueError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if not (torch.isfinite(self.pixel_aligned).all() and torch.isfinite(self.body_semantic).all()):
            raise NonFiniteFeatures("conditioning features must be finite")

    def features(self) -> torch.Tensor:
        return torch.cat([self.pixel_aligned, self.body_semantic], -1)

    def permuted(self, perm) -> "ConditioningBundle":
        return ConditioningBundle(self.positions[perm], self.pixel_aligned[perm], self.body_semantic[perm],
                                  self.visibility[perm])


# ---------------------------------------------------------------- positions

def backproject(depth, cam: CameraView) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    vs, us = np.nonzero(np.isfinite(depth) & (depth > 0))
    z = depth[vs, us]
    x = (us + 0.5 - cam.cx) / cam.fx * z
    y = (vs + 0.5 - cam.cy) / cam.fy * z
    pc = np.stack([x, y, z], 1)
    return (pc - cam.translation) @ cam.rotation


def _upsample_midpoints(points: np.ndarray) -> np.ndarray:
    _, idx = knn(points, points, 1, exclude_self=True)
    mids = 0.5 * (points + points[idx[:, 0]])
    return np.unique(np.concatenate([points, mids]), axis=0)


def generate_positions(cam: CameraView, depth, body_prior: BodyPrior, n: int, blend: float = 0.5,
                       gt_positions=None) -> np.ndarray:
    """Complete a depth back-projection into n Gaussian positions.

    Training passes the proxy positions through unchanged via `gt_positions`.
    Otherwise the partial cloud is mirrored through the plane that contains
    the prior's vertical axis and faces the camera, mirrored points are pulled
    halfway to their nearest prior point, and the union is densified by
    nearest-neighbour midpoints and farthest-point sampled to n.
    """
    if gt_positions is not None:
        return np.asarray(gt_positions, dtype=np.float64)
    partial = backproject(depth, cam)
    if len(partial) == 0:
        raise EmptyDepth("depth map has no foreground pixels")
    c = body_prior.centroid
    normal = cam.forward.copy()
    normal[body_prior.up] = 0.0
    if np.linalg.norm(normal) < 1e-9:
        normal = np.eye(3)[(body_prior.up + 1) % 3]
    normal /= np.linalg.norm(normal)
    mirrored = partial - 2 * ((partial - c) @ normal)[:, None] * normal
    _, nearest = cKDTree(body_prior.template_points).query(mirrored)
    mirrored = (1 - blend) * mirrored + blend * body_prior.template_points[nearest]
    pts = np.unique(np.concatenate([partial, mirrored]), axis=0)
    while len(pts) < n:
        if len(pts) < 2:
            raise EmptyDepth("too few foreground points to densify")
        pts = _upsample_midpoints(pts)
    return pts[farthest_point_sampling(pts, n)]


# ---------------------------------------------------------------- visibility

def project_points(positions, cam: CameraView):
    p = np.asarray(positions, dtype=np.float64)
    pc = p @ cam.rotation.T + cam.translation
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[:, 0] / z + cam.cx
        v = cam.fy * pc[:, 1] / z + cam.cy
    return u, v, z


def estimate_normals(points: np.ndarray, k: int = 8) -> np.ndarray:
    """Unoriented unit normals from the smallest principal axis of each k-neighbourhood."""
    p = np.asarray(points, dtype=np.float64)
    if len(p) < 3:
        return np.tile([0.0, 0.0, 1.0], (len(p), 1))
    k = min(k, len(p) - 1)
    _, idx = knn(p, p, k, exclude_self=True)
    nb = np.concatenate([p[:, None], p[idx]], 1)
    nb = nb - nb.mean(1, keepdims=True)
    _, vecs = np.linalg.eigh(np.einsum("nki,nkj->nij", nb, nb))
    return vecs[:, :, 0]


def partition_visibility(positions, cam: CameraView, tau: float | None = None, footprint: int = 1,
                         max_slope: float = 3.0) -> np.ndarray:
    """Point-depth-buffer visibility; footprint=1 splats each point's depth over a 3x3 block.

    A point is visible when its depth is within tau of the buffer at its pixel,
    plus the depth change of its own tangent plane across the footprint (slope
    from a kNN normal, capped at max_slope), so slanted surfaces do not hide
    their own points.
    """
    p = positions.detach().cpu().numpy() if hasattr(positions, "detach") else np.asarray(positions, np.float64)
    p = p.astype(np.float64)
    vis = np.zeros(len(p), dtype=bool)
    if len(p) == 0:
        return vis
    if tau is None:
        tau = 0.01 * float(np.linalg.norm(p.max(0) - p.min(0)))
    u, v, z = project_points(p, cam)
    ok = (z > cam.near) & (z < cam.far) & np.isfinite(u) & np.isfinite(v)
    ui = np.floor(np.where(ok, u, -1)).astype(np.int64)
    vi = np.floor(np.where(ok, v, -1)).astype(np.int64)
    ok &= (ui >= 0) & (ui < cam.width) & (vi >= 0) & (vi < cam.height)
    idx = np.flatnonzero(ok)
    if len(idx) == 0:
        return vis
    buf = np.full((cam.height, cam.width), np.inf)
    for du in range(-footprint, footprint + 1):
        for dv in range(-footprint, footprint + 1):
            uu, vv = ui[idx] + du, vi[idx] + dv
            inb = (uu >= 0) & (uu < cam.width) & (vv >= 0) & (vv < cam.height)
            np.minimum.at(buf, (vv[inb], uu[inb]), z[idx][inb])
    pc = p[idx] @ cam.rotation.T + cam.translation
    normal = estimate_normals(p)[idx] @ cam.rotation.T
    cos = np.abs((normal * pc).sum(1) / np.linalg.norm(pc, axis=1)).clip(1e-6, 1.0)
    slope = np.minimum(np.sqrt(1 - cos ** 2) / cos, max_slope)
    pixel = z[idx] / min(cam.fx, cam.fy)
    allowance = tau + (footprint + 1) * pixel * slope
    vis[idx] = z[idx] <= buf[vi[idx], ui[idx]] + allowance
    return vis


# ---------------------------------------------------------------- back view

class BackViewProvider(Protocol):
    def __call__(self, cam: CameraView, scene) -> tuple[torch.Tensor, CameraView]: ...


def mirrored_camera(cam: CameraView, body_prior: BodyPrior | None, fallback_points=None) -> CameraView:
    if body_prior is not None:
        pivot, up = body_prior.centroid, body_prior.up
    elif fallback_points is not None:
        pivot, up = np.asarray(fallback_points, dtype=np.float64).mean(0), 1
    else:
        raise MissingBackView("no body prior or geometry to place the back camera")
    return rotate_about_vertical(cam, pivot, math.pi, up)


class GroundTruthBackView:
    """Back view from the capture itself: a captured image at the mirrored pose, else a surface render."""

    def __init__(self, pose_tol: float = 1e-4):
        self.pose_tol = pose_tol

    def __call__(self, cam: CameraView, scene) -> tuple[torch.Tensor, CameraView]:
        surface = getattr(scene, "surface", None)
        prior = getattr(scene, "body_prior", None)
        back = mirrored_camera(cam, prior, None if surface is None else surface.points)
        for k, view in enumerate(getattr(scene, "views", []) or []):
            if (np.abs(view.world_to_camera - back.world_to_camera).max() < self.pose_tol
                    and (view.width, view.height) == (cam.width, cam.height)):
                return scene.images[k].clone(), back
        if surface is None:
            raise MissingBackView("scene has neither a view nor a surface at the mirrored pose")
        return render_surface(surface, back).rgb, back


def back_view_provider(cam: CameraView, scene, provider: BackViewProvider | None = None):
    return (provider or GroundTruthBackView())(cam, scene)


# ---------------------------------------------------------------- learned features

class ImageEncoder(nn.Module):
    """Small CNN producing feature maps at strides 1, 2 and 4; stride 1 also carries the raw RGB."""

    strides = (1, 2, 4)

    def __init__(self, channels: int = 8):
        super().__init__()
        c = channels
        self.channels = c
        self.s1 = nn.Sequential(nn.Conv2d(3, c, 3, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1))
        self.s2 = nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1))
        self.s4 = nn.Sequential(nn.Conv2d(c, c, 3, stride=2, padding=1), nn.SiLU(), nn.Conv2d(c, c, 3, padding=1))

    @property
    def out_dim(self) -> int:
        return 3 + 3 * self.channels

    def forward(self, img: torch.Tensor) -> list:
        x = img.permute(2, 0, 1).unsqueeze(0)
        f1 = self.s1(x)
        f2 = self.s2(f1)
        f4 = self.s4(f2)
        return [torch.cat([x, f1], 1), f2, f4]


def sample_maps(maps: list, u: torch.Tensor, v: torch.Tensor, width: int, height: int,
                valid: torch.Tensor) -> torch.Tensor:
    """Bilinear samples at continuous pixel coords (u, v); zeros where `valid` is False."""
    gx = (u / width) * 2 - 1
    gy = (v / height) * 2 - 1
    grid = torch.stack([torch.where(valid, gx, torch.zeros_like(gx)),
                        torch.where(valid, gy, torch.zeros_like(gy))], -1).view(1, 1, -1, 2)
    feats = [F.grid_sample(m, grid.to(m.dtype), mode="bilinear", padding_mode="border", align_corners=False)[0, :, 0].T
             for m in maps]
    out = torch.cat(feats, -1)
    return torch.where(valid.unsqueeze(-1), out, torch.zeros_like(out))


def _projection(positions: torch.Tensor, cam: CameraView):
    u, v, z = project_points(positions.detach().cpu().numpy(), cam)
    valid = (z > cam.near) & (z < cam.far) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    u = np.where(valid, u, 0.0)
    v = np.where(valid, v, 0.0)
    dt = positions.dtype
    return torch.as_tensor(u, dtype=dt), torch.as_tensor(v, dtype=dt), torch.as_tensor(valid)


def pixel_aligned_features(positions, visibility, image_front, image_back, cam_front: CameraView,
                           cam_back: CameraView, encoder: ImageEncoder) -> torch.Tensor:
    """beta = [front sample, back sample, visibility flag] per point."""
    positions = torch.as_tensor(positions)
    dt = next(encoder.parameters()).dtype
    uf, vf, okf = _projection(positions, cam_front)
    ub, vb, okb = _projection(positions, cam_back)
    front = sample_maps(encoder(torch.as_tensor(image_front, dtype=dt)), uf.to(dt), vf.to(dt),
                        cam_front.width, cam_front.height, okf)
    back = sample_maps(encoder(torch.as_tensor(image_back, dtype=dt)), ub.to(dt), vb.to(dt),
                       cam_back.width, cam_back.height, okb)
    flag = torch.as_tensor(np.asarray(visibility), dtype=dt).reshape(-1, 1)
    return torch.cat([front, back, flag], -1)


def nearest_template(positions, body_prior: BodyPrior):
    """(index, distance, label) of the nearest template point for every position."""
    p = positions.detach().cpu().numpy() if hasattr(positions, "detach") else np.asarray(positions)
    d, idx = knn(np.asarray(p, np.float64), body_prior.template_points, 1)
    idx = idx[:, 0]
    return idx, d[:, 0], body_prior.part_labels[idx]


class BodyEmbedder(nn.Module):
    def __init__(self, max_index: int = 512, n_parts: int = N_PARTS, index_dim: int = 16, dist_dim: int = 8,
                 label_dim: int = 16):
        super().__init__()
        self.max_index = max_index
        self.index = nn.Embedding(max_index, index_dim)
        self.dist = nn.Sequential(nn.Linear(1, dist_dim), nn.SiLU(), nn.Linear(dist_dim, dist_dim))
        self.label = nn.Embedding(n_parts, label_dim)
        self.out_dim = index_dim + dist_dim + label_dim

    def forward(self, idx, dist, label):
        dt = self.dist[0].weight.dtype
        idx = torch.as_tensor(idx, dtype=torch.long) % self.max_index
        dist = torch.as_tensor(dist, dtype=dt).reshape(-1, 1)
        return torch.cat([self.index(idx), self.dist(dist), self.label(torch.as_tensor(label, dtype=torch.long))], -1)


def body_semantic_features(positions, body_prior: BodyPrior, embedder: BodyEmbedder, lookup=None) -> torch.Tensor:
    idx, dist, label = nearest_template(positions, body_prior) if lookup is None else lookup
    return embedder(idx, dist, label)


@dataclass(frozen=True, eq=False)
class ConditionInputs:
    """Everything about one input view that does not depend on learned parameters."""

    positions: torch.Tensor
    visibility: np.ndarray
    image_front: torch.Tensor
    image_back: torch.Tensor
    cam_front: CameraView
    cam_back: CameraView
    lookup: tuple
    hier: Hierarchy | None = None

    def __post_init__(self):
        if self.hier is None:
            object.__setattr__(self, "hier", build_hierarchy(self.positions))

    def permuted(self, perm) -> "ConditionInputs":
        perm = np.asarray(perm)
        idx, dist, label = self.lookup
        return ConditionInputs(self.positions[torch.as_tensor(perm)], self.visibility[perm], self.image_front,
                               self.image_back, self.cam_front, self.cam_back, (idx[perm], dist[perm], label[perm]))

    def to(self, dtype) -> "ConditionInputs":
        return ConditionInputs(self.positions.to(dtype), self.visibility, self.image_front.to(dtype),
                               self.image_back.to(dtype), self.cam_front, self.cam_back, self.lookup, self.hier)


def prepare_condition(positions, image, cam: CameraView, scene, body_prior: BodyPrior,
                      provider: BackViewProvider | None = None, tau: float | None = None) -> ConditionInputs:
    positions = torch.as_tensor(np.asarray(positions.detach() if hasattr(positions, "detach") else positions),
                                dtype=torch.float32)
    vis = partition_visibility(positions, cam, tau)
    back_img, back_cam = back_view_provider(cam, scene, provider)
    return ConditionInputs(positions, vis, torch.as_tensor(image, dtype=torch.float32),
                           torch.as_tensor(back_img, dtype=torch.float32), cam, back_cam,
                           nearest_template(positions, body_prior))


class ConditionNet(nn.Module):
    """Learned part of the conditioning: image encoder plus body embedder."""

    def __init__(self, channels: int = 8, max_index: int = 512, n_parts: int = N_PARTS,
                 use_back: bool = True, use_semantic: bool = True):
        super().__init__()
        self.encoder = ImageEncoder(channels)
        self.embedder = BodyEmbedder(max_index, n_parts)
        self.use_back = use_back
        self.use_semantic = use_semantic

    @property
    def beta_dim(self) -> int:
        return 2 * self.encoder.out_dim + 1

    @property
    def gamma_dim(self) -> int:
        return self.embedder.out_dim

    @property
    def out_dim(self) -> int:
        return self.beta_dim + self.gamma_dim

    def forward(self, ci: ConditionInputs) -> ConditioningBundle:
        back = ci.image_back if self.use_back else torch.zeros_like(ci.image_back)
        beta = pixel_aligned_features(ci.positions, ci.visibility, ci.image_front, back, ci.cam_front,
                                      ci.cam_back, self.encoder)
        gamma = body_semantic_features(ci.positions, None, self.embedder, ci.lookup)
        if not self.use_semantic:
            gamma = torch.zeros_like(gamma)
        return ConditioningBundle(ci.positions.to(beta.dtype), beta, gamma, torch.as_tensor(ci.visibility))
