"""Differentiable splat rasterisation and photometric losses.

Pixel (u, v) has its centre at (u + 0.5, v + 0.5) in image coordinates. Splats are
composited front to back after a global depth sort; a splat touches a pixel only
inside its 3-sigma ellipse. The tiled path and the dense path evaluate the same
per-pixel sums; tiling only skips splats whose 3-sigma box misses the tile.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .camera import CameraView
from .errors import InvalidGradient, ShapeError
from .gaussians import GaussianAttributeSet, covariances, eval_sh

COV2D_FLOOR = 0.3
CUTOFF_SIGMA = 3.0
TILE = 16
SSIM_LAMBDA = 0.2


@dataclass(frozen=True, eq=False)
class ProjectedSplat:
    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor


@dataclass(frozen=True, eq=False)
class Projection:
    """Batched projection result; `mask` marks splats inside [near, far]."""

    mean2d: torch.Tensor
    cov2d: torch.Tensor
    depth: torch.Tensor
    color: torch.Tensor
    mask: torch.Tensor

    def __len__(self):
        return self.mean2d.shape[0]

    def __getitem__(self, i) -> ProjectedSplat:
        return ProjectedSplat(self.mean2d[i], self.cov2d[i], self.depth[i], self.color[i])


@dataclass(frozen=True, eq=False)
class RenderedImage:
    rgb: torch.Tensor    # (H, W, 3)
    alpha: torch.Tensor  # (H, W)


def project(attrs: GaussianAttributeSet, cam: CameraView) -> Projection:
    dtype = attrs.positions.dtype
    R = torch.as_tensor(cam.rotation, dtype=dtype)
    t = torch.as_tensor(cam.translation, dtype=dtype)
    p_cam = attrs.positions @ R.T + t
    x, y, z = p_cam.unbind(-1)
    mask = (z >= cam.near) & (z <= cam.far)
    zs = torch.where(mask, z, torch.ones_like(z))
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    zero = torch.zeros_like(zs)
    J = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * x / zs ** 2], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * y / zs ** 2], -1),
    ], -2)
    T = J @ R
    q = attrs.rotations
    cov3d = covariances(attrs.scales, q / q.norm(dim=-1, keepdim=True))
    cov2d = T @ cov3d @ T.transpose(-1, -2)
    cov2d = cov2d + COV2D_FLOOR * torch.eye(2, dtype=dtype)
    center = torch.as_tensor(cam.center, dtype=dtype)
    d = attrs.positions - center
    d = d / d.norm(dim=-1, keepdim=True).clamp_min(1e-12)
    color = (eval_sh(attrs.sh_coeffs, d, attrs.sh_degree) + 0.5).clamp(0.0, 1.0)
    return Projection(torch.stack([u, v], -1), cov2d, z, color, mask)


def depth_order(proj: Projection, positions: torch.Tensor) -> torch.Tensor:
    """Indices of visible splats sorted by depth; ties by world x, y, z, then index."""
    idx = torch.nonzero(proj.mask).reshape(-1).numpy()
    if idx.size == 0:
        return torch.zeros(0, dtype=torch.long)
    p = positions.detach().cpu().numpy()[idx]
    z = proj.depth.detach().cpu().numpy()[idx]
    order = np.lexsort((idx, p[:, 2], p[:, 1], p[:, 0], z))
    return torch.as_tensor(idx[order], dtype=torch.long)


def _conics(cov2d):
    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    return torch.stack([c / det, -b / det, a / det], -1)


def _composite(px, mean2d, conic, opacity, color):
    """Front-to-back compositing of ordered splats over pixel centres px (P, 2)."""
    d = px.unsqueeze(0) - mean2d.unsqueeze(1)  # (n, P, 2)
    dx, dy = d[..., 0], d[..., 1]
    m = conic[:, 0:1] * dx * dx + 2 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
    inside = m <= CUTOFF_SIGMA ** 2
    g = torch.where(inside, opacity.unsqueeze(1) * torch.exp(-0.5 * torch.where(inside, m, torch.zeros_like(m))),
                    torch.zeros_like(m))
    keep = torch.cumprod(1 - g, dim=0)
    trans = torch.cat([torch.ones_like(keep[:1]), keep[:-1]], 0)
    w = trans * g
    rgb = w.transpose(0, 1) @ color
    return rgb, w.sum(0)


def render(attrs: GaussianAttributeSet, cam: CameraView, tile_size: int | None = TILE) -> RenderedImage:
    """Render `attrs` into `cam`. tile_size=None evaluates every splat at every pixel."""
    dtype = attrs.positions.dtype
    H, W = cam.height, cam.width
    if len(attrs) == 0:
        return RenderedImage(torch.zeros(H, W, 3, dtype=dtype), torch.zeros(H, W, dtype=dtype))
    proj = project(attrs, cam)
    order = depth_order(proj, attrs.positions)
    if order.numel() == 0:
        return RenderedImage(torch.zeros(H, W, 3, dtype=dtype), torch.zeros(H, W, dtype=dtype))
    mean2d = proj.mean2d[order]
    cov2d = proj.cov2d[order]
    conic = _conics(cov2d)
    opacity = attrs.opacities[order]
    color = proj.color[order]

    if tile_size is None:
        vs, us = torch.meshgrid(torch.arange(H, dtype=dtype), torch.arange(W, dtype=dtype), indexing="ij")
        px = torch.stack([us.reshape(-1), vs.reshape(-1)], -1) + 0.5
        rgb, alpha = _composite(px, mean2d, conic, opacity, color)
        return _finish(rgb.reshape(H, W, 3), alpha.reshape(H, W))

    with torch.no_grad():
        ext = CUTOFF_SIGMA * torch.sqrt(torch.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], -1))
        lo = (mean2d - ext).numpy()
        hi = (mean2d + ext).numpy()
    rows = []
    for v0 in range(0, H, tile_size):
        v1 = min(v0 + tile_size, H)
        row = []
        for u0 in range(0, W, tile_size):
            u1 = min(u0 + tile_size, W)
            hit = (hi[:, 0] >= u0 + 0.5) & (lo[:, 0] <= u1 - 0.5) & (hi[:, 1] >= v0 + 0.5) & (lo[:, 1] <= v1 - 0.5)
            sel = torch.as_tensor(np.nonzero(hit)[0], dtype=torch.long)
            th, tw = v1 - v0, u1 - u0
            if sel.numel() == 0:
                row.append((torch.zeros(th, tw, 3, dtype=dtype), torch.zeros(th, tw, dtype=dtype)))
                continue
            vs, us = torch.meshgrid(torch.arange(v0, v1, dtype=dtype), torch.arange(u0, u1, dtype=dtype),
                                    indexing="ij")
            px = torch.stack([us.reshape(-1), vs.reshape(-1)], -1) + 0.5
            rgb, alpha = _composite(px, mean2d[sel], conic[sel], opacity[sel], color[sel])
            row.append((rgb.reshape(th, tw, 3), alpha.reshape(th, tw)))
        rows.append((torch.cat([r[0] for r in row], 1), torch.cat([r[1] for r in row], 1)))
    rgb = torch.cat([r[0] for r in rows], 0)
    alpha = torch.cat([r[1] for r in rows], 0)
    return _finish(rgb, alpha)


def _finish(rgb, alpha):
    return RenderedImage(rgb.clamp(0.0, 1.0), alpha.clamp(0.0, 1.0))


def render_gradients(attrs: GaussianAttributeSet, cam: CameraView, upstream, tile_size: int | None = TILE) -> dict:
    """Vector-Jacobian product of the rendered rgb with `upstream` for every attribute."""
    upstream = torch.as_tensor(upstream, dtype=attrs.dtype)
    if upstream.shape != (cam.height, cam.width, 3):
        raise ShapeError(f"upstream shape {tuple(upstream.shape)} != {(cam.height, cam.width, 3)}")
    if not torch.isfinite(upstream).all():
        raise InvalidGradient("upstream gradient contains non-finite values")
    leaves = {name: getattr(attrs, name).detach().clone().requires_grad_(True)
              for name in ("positions", "opacities", "scales", "rotations", "sh_coeffs")}
    s = GaussianAttributeSet(**leaves, sh_degree=attrs.sh_degree)
    img = render(s, cam, tile_size)
    grads = torch.autograd.grad(img.rgb, list(leaves.values()), upstream, allow_unused=True)
    return {name: (g if g is not None else torch.zeros_like(leaves[name]))
            for name, g in zip(leaves, grads)}


def gaussian_window(size: int = 11, sigma: float = 1.5, dtype=torch.float32) -> torch.Tensor:
    x = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    g = torch.exp(-x ** 2 / (2 * sigma ** 2))
    g = g / g.sum()
    return (g[:, None] * g[None, :]).to(dtype)


def ssim_map(a: torch.Tensor, b: torch.Tensor, window: int = 11, sigma: float = 1.5,
             padding: str = "same") -> torch.Tensor:
    """Per-channel SSIM map for (H, W, C) images in [0, 1]."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    C = a.shape[-1]
    x = a.permute(2, 0, 1).unsqueeze(0)
    y = b.permute(2, 0, 1).unsqueeze(0)
    w = gaussian_window(window, sigma, a.dtype).expand(C, 1, window, window)
    pad = window // 2 if padding == "same" else 0

    def filt(t):
        return F.conv2d(t, w, padding=pad, groups=C)

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return (num / den)[0].permute(1, 2, 0)


def photometric_value(rgb: torch.Tensor, target: torch.Tensor, lam: float = SSIM_LAMBDA) -> torch.Tensor:
    """(1 - lam) * L1 + lam * (1 - SSIM); differentiable in both arguments."""
    if rgb.shape != target.shape:
        raise ShapeError(f"rendered {tuple(rgb.shape)} vs target {tuple(target.shape)}")
    l1 = (rgb - target).abs().mean()
    return (1 - lam) * l1 + lam * (1 - ssim_map(rgb, target).mean())


def photometric_loss(rendered, target, lam: float = SSIM_LAMBDA):
    """Loss value and its gradient with respect to the rendered rgb."""
    rgb = rendered.rgb if isinstance(rendered, RenderedImage) else rendered
    rgb = torch.as_tensor(rgb).detach().clone().requires_grad_(True)
    target = torch.as_tensor(target, dtype=rgb.dtype)
    loss = photometric_value(rgb, target, lam)
    (grad,) = torch.autograd.grad(loss, rgb)
    return loss.detach(), grad


def image_to_tensor(img, dtype=torch.float32) -> torch.Tensor:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        arr = arr.astype(np.float64) / 255.0
    return torch.as_tensor(arr[..., :3], dtype=dtype)


def covered_fraction(img: RenderedImage, threshold: float = 0.5) -> float:
    return float((img.alpha > threshold).double().mean())


def fov_to_focal(fov_deg: float, size: int) -> float:
    return 0.5 * size / math.tan(math.radians(fov_deg) / 2)
