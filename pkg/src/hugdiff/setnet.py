"""Set-structured networks over point clouds.

The backbone is a two-level hierarchical encoder/decoder: farthest-point
centres, k-nearest-neighbour grouping with max-pooling, a global max feature,
and inverse-distance propagation back to every point with skip links. All
grouping is derived from positions alone and is invariant to point order, and
every layer acts row-wise, so outputs are exactly permutation-equivariant.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .gaussians import RawAttributeSet
from .geometry import farthest_point_sampling, knn


def _linear(n_in: int, n_out: int) -> nn.Linear:
    # He init keeps activations O(1) through deep SiLU stacks; the torch default shrinks them
    lin = nn.Linear(n_in, n_out)
    nn.init.kaiming_normal_(lin.weight, nonlinearity="relu")
    nn.init.zeros_(lin.bias)
    return lin


def mlp(dims, last_act=False):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(_linear(dims[i], dims[i + 1]))
        if i < len(dims) - 2 or last_act:
            layers.append(nn.SiLU())
    return nn.Sequential(*layers)


class PositionalEncoding(nn.Module):
    def __init__(self, n_freqs: int = 6):
        super().__init__()
        self.register_buffer("freqs", (2.0 ** torch.arange(n_freqs)) * math.pi, persistent=False)
        self.out_dim = 3 + 6 * n_freqs

    def forward(self, x):
        ang = x.unsqueeze(-1) * self.freqs.to(x.dtype)
        ang = ang.reshape(x.shape[0], -1)
        return torch.cat([x, torch.sin(ang), torch.cos(ang)], -1)


def timestep_embedding(t, dim: int = 128, dtype=torch.float32):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    ang = float(t) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)]).to(dtype)


@dataclass
class Hierarchy:
    """Index structure for one point set; depends only on the positions."""

    centers1: torch.Tensor   # (M1,) indices into points
    group1: torch.Tensor     # (M1, k1) indices into points
    centers2: torch.Tensor   # (M2,) indices into centers1
    group2: torch.Tensor     # (M2, k2) indices into centers1
    up2_idx: torch.Tensor    # (M1, 3) indices into centers2
    up2_w: torch.Tensor
    up1_idx: torch.Tensor    # (N, 3) indices into centers1
    up1_w: torch.Tensor
    graph: torch.Tensor      # (N, kg) point kNN graph, self excluded when possible


def _interp(queries, sources, k=3):
    k = min(k, len(sources))
    d, idx = knn(queries, sources, k)
    w = 1.0 / (d + 1e-8)
    w = w / w.sum(1, keepdims=True)
    return torch.as_tensor(idx, dtype=torch.long), torch.as_tensor(w)


def build_hierarchy(positions, ratio: int = 4, k1: int = 16, k2: int = 8, k_graph: int = 8) -> Hierarchy:
    p = positions.detach().cpu().numpy().astype(np.float64) if hasattr(positions, "detach") else np.asarray(positions, np.float64)
    n = len(p)
    m1 = max(1, math.ceil(n / ratio))
    m2 = max(1, math.ceil(m1 / ratio))
    c1 = farthest_point_sampling(p, m1)
    p1 = p[c1]
    _, g1 = knn(p1, p, min(k1, n))
    c2 = farthest_point_sampling(p1, m2)
    p2 = p1[c2]
    _, g2 = knn(p2, p1, min(k2, m1))
    up2_idx, up2_w = _interp(p1, p2)
    up1_idx, up1_w = _interp(p, p1)
    if n > 1:
        _, graph = knn(p, p, min(k_graph, n - 1), exclude_self=True)
    else:
        graph = np.zeros((1, 1), dtype=np.int64)
    as_long = lambda a: torch.as_tensor(a, dtype=torch.long)
    return Hierarchy(as_long(c1), as_long(g1), as_long(c2), as_long(g2), up2_idx, up2_w,
                     up1_idx, up1_w, as_long(graph))


class SetBackbone(nn.Module):
    def __init__(self, in_dim: int, width: int = 64, t_dim: int | None = None):
        super().__init__()
        w = width
        self.width = w
        self.embed = mlp([in_dim, w, w], last_act=True)
        self.sa1 = mlp([w + 3, w, 2 * w], last_act=True)
        self.sa2 = mlp([2 * w + 3, 2 * w, 4 * w], last_act=True)
        self.glob = mlp([8 * w, 4 * w], last_act=True)
        self.fp2 = mlp([4 * w + 2 * w, 2 * w, 2 * w], last_act=True)
        self.fp1 = mlp([2 * w + w, w, w], last_act=True)
        self.t_proj = None
        if t_dim is not None:
            self.t_proj = nn.ModuleList([nn.Linear(t_dim, c) for c in (w, 2 * w, 4 * w, 2 * w, w)])

    def forward(self, x, positions, hier: Hierarchy, temb=None):
        tb = [0.0] * 5 if temb is None or self.t_proj is None else [proj(temb) for proj in self.t_proj]
        pos = positions
        f0 = self.embed(x) + tb[0]
        p1 = pos[hier.centers1]
        grp = torch.cat([f0[hier.group1], pos[hier.group1] - p1.unsqueeze(1)], -1)
        f1 = self.sa1(grp).amax(1) + tb[1]
        p2 = p1[hier.centers2]
        grp = torch.cat([f1[hier.group2], p1[hier.group2] - p2.unsqueeze(1)], -1)
        f2 = self.sa2(grp).amax(1)
        g = f2.amax(0, keepdim=True).expand_as(f2)
        f2 = self.glob(torch.cat([f2, g], -1)) + tb[2]
        up = (f2[hier.up2_idx] * hier.up2_w.to(f2.dtype).unsqueeze(-1)).sum(1)
        f1 = self.fp2(torch.cat([up, f1], -1)) + tb[3]
        up = (f1[hier.up1_idx] * hier.up1_w.to(f1.dtype).unsqueeze(-1)).sum(1)
        return self.fp1(torch.cat([up, f0], -1)) + tb[4]


class EdgeConv(nn.Module):
    def __init__(self, dim: int, out: int):
        super().__init__()
        self.net = mlp([2 * dim + 3, out, out], last_act=True)

    def forward(self, f, positions, graph):
        fi = f.unsqueeze(1).expand(-1, graph.shape[1], -1)
        fj = f[graph]
        rel = positions[graph] - positions.unsqueeze(1)
        return self.net(torch.cat([fi, fj - fi, rel], -1)).amax(1)


class SetNetwork(nn.Module):
    """Maps positions (+ optional per-point features) to raw Gaussian attributes.

    One head regresses SH coefficients from the backbone; opacity, scale and
    rotation heads share a trunk that first aggregates over the point kNN graph.
    """

    def __init__(self, sh_dim: int, extra_dim: int = 0, width: int = 64, n_freqs: int = 6,
                 t_dim: int | None = None, geometry_heads: bool = True):
        super().__init__()
        self.sh_dim = sh_dim
        self.extra_dim = extra_dim
        self.pe = PositionalEncoding(n_freqs)
        self.backbone = SetBackbone(self.pe.out_dim + extra_dim, width, t_dim)
        self.sh_head = mlp([width, width, sh_dim])
        nn.init.zeros_(self.sh_head[-1].weight)
        nn.init.zeros_(self.sh_head[-1].bias)
        self.geometry_heads = geometry_heads
        if geometry_heads:
            self.edge = EdgeConv(width, width)
            self.opacity_head = mlp([width, width, 1])
            self.scale_head = mlp([width, width, 3])
            self.rotation_head = mlp([width, width, 4])
            for head in (self.opacity_head, self.scale_head, self.rotation_head):
                head[-1].weight.data.mul_(0.01)
            self.set_output_bias()

    def set_output_bias(self, opacity: float = 0.9, scale: float = 0.02):
        with torch.no_grad():
            self.opacity_head[-1].bias.fill_(math.log(opacity / (1 - opacity)))
            self.scale_head[-1].bias.fill_(math.log(scale))
            self.rotation_head[-1].bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))

    def forward(self, positions, extra=None, hier: Hierarchy | None = None, temb=None) -> dict:
        if hier is None:
            hier = build_hierarchy(positions)
        x = self.pe(positions)
        if self.extra_dim:
            x = torch.cat([x, extra], -1)
        f = self.backbone(x, positions, hier, temb)
        out = {"sh": self.sh_head(f)}
        if self.geometry_heads:
            e = self.edge(f, positions, hier.graph)
            out["opacity_raw"] = self.opacity_head(e).squeeze(-1)
            out["scale_raw"] = self.scale_head(e)
            out["rotation_raw"] = self.rotation_head(e)
        return out

    def raw_set(self, positions, out: dict, sh_degree: int, sh=None) -> RawAttributeSet:
        return RawAttributeSet(positions, out["opacity_raw"], out["scale_raw"], out["rotation_raw"],
                               out["sh"] if sh is None else sh, sh_degree)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
