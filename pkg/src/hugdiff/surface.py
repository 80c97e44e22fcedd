"""Ground-truth body surfaces: coloured meshes and point clouds.

Surfaces are rendered by splatting their vertices (meshes) or points (clouds)
as small isotropic opaque Gaussians through the same rasteriser used
everywhere else, which keeps synthetic targets reachable by a Gaussian set.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .camera import CameraView
from .errors import EmptySurface, FormatError
from .gaussians import GaussianAttributeSet, rgb_to_sh_dc
from .geometry import kdist
from .render import RenderedImage, render


@dataclass(frozen=True, eq=False)
class Mesh:
    vertices: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3) int
    colors: np.ndarray            # (V, 3) in [0, 1]

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def points(self) -> np.ndarray:
        return self.vertices


@dataclass(frozen=True, eq=False)
class PointSurface:
    points: np.ndarray            # (M, 3)
    colors: np.ndarray            # (M, 3)


def ellipsoid_mesh(radii=(0.3, 0.3, 0.3), center=(0.0, 0.0, 0.0), n_lat: int = 32, n_lon: int = 64,
                   color_fn=None) -> Mesh:
    """UV ellipsoid. With n_lon divisible by 4 the vertex set is mirror-symmetric in x and z."""
    radii = np.asarray(radii, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    verts = [np.array([0.0, 1.0, 0.0])]
    for i in range(1, n_lat):
        theta = math.pi * i / n_lat
        for j in range(n_lon):
            phi = 2 * math.pi * j / n_lon
            verts.append(np.array([math.sin(theta) * math.sin(phi), math.cos(theta),
                                   math.sin(theta) * math.cos(phi)]))
    verts.append(np.array([0.0, -1.0, 0.0]))
    unit = np.stack(verts)
    v = unit * radii + center
    faces = []
    for j in range(n_lon):
        faces.append((0, 1 + (j + 1) % n_lon, 1 + j))
    for i in range(n_lat - 2):
        r0 = 1 + i * n_lon
        r1 = r0 + n_lon
        for j in range(n_lon):
            a, b = r0 + j, r0 + (j + 1) % n_lon
            c, d = r1 + j, r1 + (j + 1) % n_lon
            faces += [(a, b, d), (a, d, c)]
    last = len(verts) - 1
    r0 = 1 + (n_lat - 2) * n_lon
    for j in range(n_lon):
        faces.append((r0 + j, r0 + (j + 1) % n_lon, last))
    colors = np.full((len(v), 3), 0.5) if color_fn is None else np.clip(color_fn(unit), 0.0, 1.0)
    return Mesh(v, np.asarray(faces, dtype=np.int64), colors)


def sample_surface(surface, n: int, seed: int = 0):
    """Area-uniform samples on a mesh -> (points, colors). Raises EmptySurface for zero area."""
    rng = np.random.default_rng(seed)
    areas = surface.face_areas()
    total = areas.sum()
    if not np.isfinite(total) or total <= 0:
        raise EmptySurface("mesh has zero surface area")
    face = rng.choice(len(areas), size=n, p=areas / total)
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    bary = np.stack([1 - r1, r1 * (1 - r2), r1 * r2], 1)
    tri = surface.faces[face]
    pts = np.einsum("nk,nkd->nd", bary, surface.vertices[tri])
    cols = np.einsum("nk,nkd->nd", bary, surface.colors[tri])
    return pts, cols


def surface_splats(surface, scale_factor: float = 0.7, dtype=torch.float32) -> GaussianAttributeSet:
    pts = np.asarray(surface.points, dtype=np.float64)
    if len(pts) < 5:
        raise EmptySurface("surface has too few points to render")
    sc = np.maximum(kdist(pts, 4) * scale_factor, 1e-5)
    n = len(pts)
    rot = np.zeros((n, 4))
    rot[:, 0] = 1
    sh = rgb_to_sh_dc(np.asarray(surface.colors, dtype=np.float64))
    return GaussianAttributeSet.from_arrays(pts, np.full(n, 0.999), np.repeat(sc[:, None], 3, 1), rot, sh,
                                            sh_degree=0, dtype=dtype)


def render_surface(surface, cam: CameraView, splats: GaussianAttributeSet | None = None) -> RenderedImage:
    """Ground-truth render of a surface (no gradients)."""
    with torch.no_grad():
        return render(splats if splats is not None else surface_splats(surface), cam)


def _triangle_mesh(surface) -> Mesh:
    if isinstance(surface, Mesh):
        return surface
    raise EmptySurface("depth ray casting needs a triangle mesh")


def raycast_depth(surface, cam: CameraView, chunk: int = 256) -> np.ndarray:
    """Camera-z depth of the first mesh hit per pixel centre; 0 where the ray misses."""
    mesh = _triangle_mesh(surface)
    H, W = cam.height, cam.width
    vs, us = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    dirs_cam = np.stack([(us - cam.cx) / cam.fx, (vs - cam.cy) / cam.fy, np.ones_like(us)], -1).reshape(-1, 3)
    R = cam.rotation
    dirs = dirs_cam @ R  # world directions (unnormalised; t along them equals camera z)
    origin = cam.center
    v0 = mesh.vertices[mesh.faces[:, 0]]
    e1 = mesh.vertices[mesh.faces[:, 1]] - v0
    e2 = mesh.vertices[mesh.faces[:, 2]] - v0
    s = origin - v0
    q = np.cross(s, e1)
    depth = np.zeros(len(dirs))
    for start in range(0, len(dirs), chunk):
        d = dirs[start:start + chunk]
        h = np.cross(d[:, None, :], e2[None])
        a = (h * e1[None]).sum(-1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = 1.0 / a
            u = f * (h * s[None]).sum(-1)
            v = f * (d[:, None, :] * q[None]).sum(-1)
            t = f * (q[None] * e2[None]).sum(-1)
        hit = (np.abs(a) > 1e-12) & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > cam.near) & (t < cam.far)
        t = np.where(hit, t, np.inf)
        best = t.min(1)
        depth[start:start + chunk] = np.where(np.isfinite(best), best, 0.0)
    return depth.reshape(H, W)


def save_obj(mesh: Mesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g} {r:.6g} {g:.6g} {b:.6g}"
             for (x, y, z), (r, g, b) in zip(mesh.vertices, mesh.colors)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> Mesh:
    verts, cols, faces = [], [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        try:
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                cols.append(vals[3:6] if len(vals) >= 6 else [0.5, 0.5, 0.5])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from exc
    if not verts or not faces:
        raise EmptySurface(f"{path}: no vertices or faces")
    return Mesh(np.asarray(verts, float), np.asarray(faces, np.int64), np.clip(np.asarray(cols, float), 0, 1))


_PLY_TYPES = {"float": "f4", "float32": "f4", "double": "f8", "float64": "f8", "uchar": "u1", "uint8": "u1",
              "char": "i1", "int8": "i1", "short": "i2", "ushort": "u2", "int": "i4", "int32": "i4",
              "uint": "u4", "uint32": "u4"}


def save_ply_points(surface: PointSurface, path) -> None:
    n = len(surface.points)
    dt = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"), ("red", "u1"), ("green", "u1"), ("blue", "u1")])
    arr = np.empty(n, dtype=dt)
    for i, k in enumerate("xyz"):
        arr[k] = surface.points[:, i]
    rgb = np.clip(np.round(surface.colors * 255), 0, 255).astype(np.uint8)
    for i, k in enumerate(("red", "green", "blue")):
        arr[k] = rgb[:, i]
    header = ("ply\nformat binary_little_endian 1.0\n"
              f"element vertex {n}\n"
              "property float x\nproperty float y\nproperty float z\n"
              "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
    Path(path).write_bytes(header.encode("ascii") + arr.tobytes())


def load_ply(path):
    """Read a PLY vertex cloud (ascii or binary little-endian); faces make it a Mesh."""
    data = Path(path).read_bytes()
    end = data.find(b"end_header")
    if not data.startswith(b"ply") or end < 0:
        raise FormatError("not a PLY file", 0)
    body_start = data.index(b"\n", end) + 1
    header = data[:end].decode("ascii", "replace").splitlines()
    fmt, elements = None, []
    for line in header:
        p = line.split()
        if not p:
            continue
        if p[0] == "format":
            fmt = p[1]
        elif p[0] == "element":
            elements.append([p[1], int(p[2]), []])
        elif p[0] == "property" and elements:
            elements[-1][2].append(p[1:])
    if fmt not in ("ascii", "binary_little_endian"):
        raise FormatError(f"unsupported PLY format {fmt}", 0)
    verts = faces = None
    if fmt == "ascii":
        tokens = data[body_start:].split()
        pos = 0
        for name, count, props in elements:
            if name == "vertex":
                width = len(props)
                vals = np.asarray(tokens[pos:pos + count * width], dtype=np.float64).reshape(count, width)
                pos += count * width
                verts = {pr[-1]: vals[:, i] for i, pr in enumerate(props)}
            elif name == "face":
                faces = []
                for _ in range(count):
                    k = int(tokens[pos])
                    faces.append([int(t) for t in tokens[pos + 1:pos + 1 + k]])
                    pos += 1 + k
    else:
        offset = body_start
        for name, count, props in elements:
            if props and props[0][0] == "list":
                cnt_t, idx_t = _PLY_TYPES[props[0][1]], _PLY_TYPES[props[0][2]]
                faces = []
                for _ in range(count):
                    k = int(np.frombuffer(data, "<" + cnt_t, 1, offset)[0])
                    offset += np.dtype(cnt_t).itemsize
                    faces.append(np.frombuffer(data, "<" + idx_t, k, offset).tolist())
                    offset += k * np.dtype(idx_t).itemsize
                continue
            dt = np.dtype([(pr[-1], "<" + _PLY_TYPES[pr[0]]) for pr in props])
            if offset + dt.itemsize * count > len(data):
                raise FormatError("truncated PLY body", len(data))
            arr = np.frombuffer(data, dt, count, offset)
            offset += dt.itemsize * count
            if name == "vertex":
                verts = {k: arr[k].astype(np.float64) for k in arr.dtype.names}
    if verts is None or not all(k in verts for k in "xyz"):
        raise FormatError("PLY has no vertex positions", 0)
    pts = np.stack([verts["x"], verts["y"], verts["z"]], 1)
    if all(k in verts for k in ("red", "green", "blue")):
        cols = np.stack([verts["red"], verts["green"], verts["blue"]], 1)
        cols = cols / 255.0 if cols.max() > 1.0 else cols
    else:
        cols = np.full_like(pts, 0.5)
    if faces:
        tris = [(f[0], f[k], f[k + 1]) for f in faces for k in range(1, len(f) - 1)]
        return Mesh(pts, np.asarray(tris, np.int64), cols)
    return PointSurface(pts, cols)


def load_surface(path):
    path = Path(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    raise FormatError(f"unsupported surface format {path.suffix}")
