"""Proxy ground-truth Gaussian attributes.

Stage 1 fits a fresh set network per scene so that its outputs, placed at fixed
surface samples, reproduce the scene's calibrated views. Stage 2 fits one shared
network to all scenes at once, consuming the stage-1 SH coefficients as extra
per-point input, which pulls per-scene attribute distributions together.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .camera import CameraView
from .errors import ConfigError, EmptySurface, InsufficientPoints, ShapeError, TrainingDiverged
from .gaussians import (DEFAULT_SCALE_MAX, GaussianAttributeSet, RawAttributeSet, activate, load_set, save_set,
                        sh_dim)
from .geometry import farthest_point_sampling, kdist
from .metrics import psnr
from .render import photometric_value, render
from .setnet import SetNetwork, build_hierarchy
from .surface import Mesh, PointSurface, sample_surface

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SceneCapture:
    scene_id: str
    views: list
    images: torch.Tensor          # (K, H, W, 3) in [0, 1]
    surface: Mesh | PointSurface
    body_prior: object = None

    def __post_init__(self):
        if len(self.views) < 2:
            raise ShapeError(f"scene {self.scene_id}: need at least 2 views, got {len(self.views)}")
        if self.images.shape[0] != len(self.views):
            raise ShapeError(f"scene {self.scene_id}: {self.images.shape[0]} images for {len(self.views)} views")
        for k, cam in enumerate(self.views):
            if tuple(self.images.shape[1:3]) != (cam.height, cam.width):
                raise ShapeError(f"scene {self.scene_id}: view {k} image {tuple(self.images.shape[1:3])} "
                                 f"does not match camera {(cam.height, cam.width)}")


@dataclass
class ProxyConfig:
    n_points: int = 200
    sh_degree: int = 1
    k_neighbors: int = 4
    w_aux: float = 0.01
    ssim_lambda: float = 0.2
    lr: float = 2e-4
    stage1_epochs: int = 4000
    stage2_epochs: int = 1300
    batch_size: int = 4
    width: int = 64
    scale_max: float = DEFAULT_SCALE_MAX
    init_opacity: float = 0.1
    init_scale: float | None = None   # None: mean kNN spacing of the positions
    stage2_aux: bool = False
    seed: int = 0
    log_every: int = 50


@dataclass(frozen=True, eq=False)
class ProxyGTRecord:
    scene_id: str
    positions: torch.Tensor
    stage1_set: GaussianAttributeSet
    unified_set: GaussianAttributeSet | None = None


@dataclass
class TrainingLog:
    epochs: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    aux: list = field(default_factory=list)

    def to_dict(self):
        return {"epoch": self.epochs, "loss": self.loss, "psnr": self.psnr, "aux": self.aux}


def sample_positions(surface, n: int, seed: int = 0) -> np.ndarray:
    """Area-uniform samples on a mesh; farthest-point subset of a point cloud."""
    if isinstance(surface, PointSurface):
        pts = np.asarray(surface.points, dtype=np.float64)
        if len(pts) == 0:
            raise EmptySurface("point cloud is empty")
        if len(pts) < n:
            raise EmptySurface(f"point cloud has {len(pts)} points, {n} requested")
        return pts[farthest_point_sampling(pts, n)]
    pts, _ = sample_surface(surface, n, seed)
    return pts


def radius(scales):
    """Per-Gaussian radius: mean of the three axis scales."""
    if isinstance(scales, torch.Tensor):
        return scales.mean(-1)
    return np.asarray(scales, dtype=np.float64).mean(-1)


def aux_penalty(scales: torch.Tensor, opacities: torch.Tensor, target_kdist: torch.Tensor) -> torch.Tensor:
    """Unweighted sum over Gaussians of (radius - kdist)^2 + (opacity - 1)^2."""
    return ((radius(scales) - target_kdist) ** 2).sum() + ((opacities - 1) ** 2).sum()


def aux_constraint_loss(attrs: GaussianAttributeSet, positions=None, k: int = 4, target_kdist=None):
    """Penalty value and its gradients w.r.t. the activated scales and opacities."""
    if target_kdist is None:
        target_kdist = kdist(attrs.positions if positions is None else positions, k)
    target = torch.as_tensor(target_kdist, dtype=attrs.dtype)
    sc = attrs.scales.detach().clone().requires_grad_(True)
    op = attrs.opacities.detach().clone().requires_grad_(True)
    val = aux_penalty(sc, op, target)
    g_sc, g_op = torch.autograd.grad(val, [sc, op])
    return val.detach(), {"scales": g_sc, "opacities": g_op}


def _check_finite(loss, epoch):
    if not torch.isfinite(loss):
        raise TrainingDiverged("non-finite loss", epoch)


def _init_heads(net: SetNetwork, cfg: ProxyConfig, spacing):
    scale = float(torch.as_tensor(spacing).mean()) if cfg.init_scale is None else cfg.init_scale
    net.set_output_bias(opacity=cfg.init_opacity, scale=min(scale, 0.5 * cfg.scale_max))


def _jitter_gradients(attrs: GaussianAttributeSet, rel: float, g: torch.Generator | None):
    """Additive noise on the per-Gaussian attribute gradients, scaled by `rel` times their mean magnitude.

    Models the rounding differences of atomically accumulated rasteriser
    gradients, whose summation order is not fixed on GPUs.
    """
    if g is None or rel == 0:
        return
    for t in (attrs.opacities, attrs.scales, attrs.rotations, attrs.sh_coeffs):
        if t.requires_grad:
            t.register_hook(lambda gr: gr + rel * gr.abs().mean() * torch.randn(gr.shape, generator=g, dtype=gr.dtype))


def stage1_overfit(scene: SceneCapture, positions, cfg: ProxyConfig, epochs: int | None = None,
                   seed: int | None = None, dtype=torch.float32, grad_jitter: float = 0.0,
                   jitter_seed: int | None = None):
    """Per-scene network overfit. Returns (activated set, TrainingLog)."""
    epochs = cfg.stage1_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    pos = torch.as_tensor(np.asarray(positions), dtype=dtype)
    target_k = torch.as_tensor(kdist(pos, cfg.k_neighbors), dtype=dtype)
    hier = build_hierarchy(pos)
    net = SetNetwork(sh_dim(cfg.sh_degree), width=cfg.width).to(dtype)
    _init_heads(net, cfg, target_k)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    images = scene.images.to(dtype)
    tlog = TrainingLog()
    # view order follows the config seed only, so init seeds can vary independently
    rng = np.random.default_rng(cfg.seed)
    jg = None if jitter_seed is None else torch.Generator().manual_seed(jitter_seed)
    for epoch in range(1, epochs + 1):
        ep_loss, ep_psnr, ep_aux = 0.0, 0.0, 0.0
        for k in rng.permutation(len(scene.views)):
            out = net(pos, hier=hier)
            attrs = activate(net.raw_set(pos, out, cfg.sh_degree), cfg.scale_max, straight_through=True)
            _jitter_gradients(attrs, grad_jitter, jg)
            img = render(attrs, scene.views[k])
            pm = photometric_value(img.rgb, images[k], cfg.ssim_lambda)
            aux = aux_penalty(attrs.scales, attrs.opacities, target_k)
            loss = pm + cfg.w_aux * aux
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            ep_loss += float(loss.detach())
            ep_aux += float(aux.detach())
            ep_psnr += psnr(img.rgb.detach(), images[k])
        K = len(scene.views)
        tlog.epochs.append(epoch)
        tlog.loss.append(ep_loss / K)
        tlog.psnr.append(ep_psnr / K)
        tlog.aux.append(ep_aux / K)
        if epoch % cfg.log_every == 0 or epoch == 1:
            log.info("stage1 %s epoch %d loss %.5f psnr %.2f aux %.4f", scene.scene_id, epoch,
                     tlog.loss[-1], tlog.psnr[-1], tlog.aux[-1])
    with torch.no_grad():
        out = net(pos, hier=hier)
        final = activate(net.raw_set(pos, out, cfg.sh_degree), cfg.scale_max).detach()
    return final, tlog


def stage2_unify(records: list, scenes: list, cfg: ProxyConfig, epochs: int | None = None,
                 seed: int | None = None, dtype=torch.float32):
    """Shared-network refit of all scenes. Returns (list of unified sets, TrainingLog)."""
    if len(records) < 1 or len(records) != len(scenes):
        raise ConfigError("stage 2 needs one stage-1 record per scene")
    degrees = {r.stage1_set.sh_degree for r in records}
    if len(degrees) != 1:
        raise ConfigError(f"mixed SH degrees across scenes: {sorted(degrees)}")
    degree = degrees.pop()
    epochs = cfg.stage2_epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    torch.manual_seed(seed)
    d = sh_dim(degree)
    net = SetNetwork(d, extra_dim=d, width=cfg.width).to(dtype)
    data = []
    for rec, scene in zip(records, scenes):
        pos = rec.positions.to(dtype)
        data.append({"pos": pos, "sh1": rec.stage1_set.sh_coeffs.to(dtype).detach(),
                     "hier": build_hierarchy(pos), "images": scene.images.to(dtype), "views": scene.views,
                     "kd": torch.as_tensor(kdist(pos, cfg.k_neighbors), dtype=dtype)})
    _init_heads(net, cfg, torch.cat([item["kd"] for item in data]))
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(seed)
    tlog = TrainingLog()
    n_views = min(len(s.views) for s in scenes)
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(data))
        batches = [order[i:i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)]
        ep_loss, ep_psnr, count = 0.0, 0.0, 0
        for batch in batches:
            for k in rng.permutation(n_views):
                loss = 0.0
                for j in batch:
                    item = data[j]
                    out = net(item["pos"], item["sh1"], hier=item["hier"])
                    attrs = activate(net.raw_set(item["pos"], out, degree), cfg.scale_max, straight_through=True)
                    img = render(attrs, item["views"][k])
                    term = photometric_value(img.rgb, item["images"][k], cfg.ssim_lambda)
                    if cfg.stage2_aux:
                        term = term + cfg.w_aux * aux_penalty(attrs.scales, attrs.opacities, item["kd"])
                    loss = loss + term
                    ep_psnr += psnr(img.rgb.detach(), item["images"][k])
                    count += 1
                _check_finite(loss, epoch)
                opt.zero_grad()
                loss.backward()
                opt.step()
                ep_loss += float(loss.detach())
        tlog.epochs.append(epoch)
        tlog.loss.append(ep_loss / count)
        tlog.psnr.append(ep_psnr / count)
        if epoch % cfg.log_every == 0 or epoch == 1:
            log.info("stage2 epoch %d loss %.5f psnr %.2f", epoch, tlog.loss[-1], tlog.psnr[-1])
    unified = []
    with torch.no_grad():
        for item, rec in zip(data, records):
            out = net(item["pos"], item["sh1"], hier=item["hier"])
            s = activate(net.raw_set(item["pos"], out, degree), cfg.scale_max).detach()
            # positions are passed through, never re-derived
            unified.append(s.replace(positions=rec.positions))
    return unified, tlog


def build_proxy(scenes: list, cfg: ProxyConfig, stage: str = "all", stage1_epochs=None, stage2_epochs=None,
                existing: list | None = None):
    """Run stage 1, stage 2, or both; returns ProxyGTRecords."""
    records = list(existing or [])
    if stage in ("1", "all"):
        records = []
        for j, scene in enumerate(scenes):
            pos = torch.as_tensor(sample_positions(scene.surface, cfg.n_points, cfg.seed + j), dtype=torch.float32)
            s1, _ = stage1_overfit(scene, pos, cfg, epochs=stage1_epochs, seed=cfg.seed + j)
            records.append(ProxyGTRecord(scene.scene_id, pos, s1.replace(positions=pos)))
    if stage in ("2", "all"):
        if not records:
            raise ConfigError("stage 2 needs stage-1 records")
        unified, _ = stage2_unify(records, scenes, cfg, epochs=stage2_epochs)
        records = [ProxyGTRecord(r.scene_id, r.positions, r.stage1_set, u) for r, u in zip(records, unified)]
    return records


_ATTRS = ("opacities", "scales", "rotations", "sh_coeffs")


def _pop_var(a: np.ndarray) -> np.ndarray:
    """Population variance over axis 0, shifted by the first row so identical rows give exactly zero."""
    return (a - a[0]).var(0)


def distribution_stats(sets: list) -> dict:
    """Per-scene min/max/mean per attribute channel and across-scene (population) variances."""
    if len(sets) < 2:
        raise InsufficientPoints("distribution_stats needs at least two sets")
    per_scene = []
    for s in sets:
        a = s.numpy()
        entry = {}
        for name in _ATTRS:
            v = np.asarray(a[name], dtype=np.float64)
            v = v.reshape(len(v), -1)
            entry[name] = {"min": v.min(0).tolist(), "max": v.max(0).tolist(), "mean": v.mean(0).tolist(),
                           "overall_min": float(v.min()), "overall_max": float(v.max())}
        per_scene.append(entry)
    across = {}
    for name in _ATTRS:
        mins = np.array([e[name]["min"] for e in per_scene])
        maxs = np.array([e[name]["max"] for e in per_scene])
        omin = np.array([e[name]["overall_min"] for e in per_scene])
        omax = np.array([e[name]["overall_max"] for e in per_scene])
        across[name] = {"var_min": _pop_var(mins).tolist(), "var_max": _pop_var(maxs).tolist(),
                        "var_overall_min": float(_pop_var(omin)), "var_overall_max": float(_pop_var(omax))}
    return {"n_sets": len(sets), "per_scene": per_scene, "across_scene": across}


def write_stats(report: dict, path, histogram_sets: list | None = None, hist_dir=None) -> None:
    Path(path).write_text(json.dumps(report, indent=1))
    if histogram_sets and hist_dir is not None:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        hist_dir = Path(hist_dir)
        hist_dir.mkdir(parents=True, exist_ok=True)
        for name in _ATTRS:
            fig, ax = plt.subplots(figsize=(5, 3))
            for i, s in enumerate(histogram_sets):
                ax.hist(getattr(s, name).detach().numpy().reshape(-1), bins=50, histtype="step", label=str(i))
            ax.set_title(name)
            fig.tight_layout()
            fig.savefig(hist_dir / f"hist_{name}.png")
            plt.close(fig)


def _vanilla_fit(scene: SceneCapture, pos: torch.Tensor, cfg: ProxyConfig, epochs: int, seed: int,
                 init_sh_std: float, lr: float, grad_jitter: float = 0.0, jitter_seed: int | None = None,
                 adam_eps: float = 1e-15):
    """Direct optimisation of free attribute variables (no network), same renderer and loss."""
    g = torch.Generator().manual_seed(seed)
    n = len(pos)
    d = sh_dim(cfg.sh_degree)
    kd = torch.as_tensor(kdist(pos, cfg.k_neighbors), dtype=pos.dtype)
    op = torch.full((n,), math.log(cfg.init_opacity / (1 - cfg.init_opacity)), dtype=pos.dtype)
    sc = torch.log(kd.clamp(1e-6, cfg.scale_max))[:, None].repeat(1, 3)
    rot = torch.zeros(n, 4, dtype=pos.dtype)
    rot[:, 0] = 1
    sh = torch.randn(n, d, generator=g, dtype=pos.dtype) * init_sh_std
    params = [t.requires_grad_(True) for t in (op, sc, rot, sh)]
    opt = torch.optim.Adam(params, lr=lr, eps=adam_eps)
    rng = np.random.default_rng(cfg.seed)
    images = scene.images.to(pos.dtype)
    jg = None if jitter_seed is None else torch.Generator().manual_seed(jitter_seed)
    for epoch in range(1, epochs + 1):
        for k in rng.permutation(len(scene.views)):
            attrs = activate(RawAttributeSet(pos, op, sc, rot, sh, cfg.sh_degree), cfg.scale_max)
            _jitter_gradients(attrs, grad_jitter, jg)
            loss = photometric_value(render(attrs, scene.views[k]).rgb, images[k], cfg.ssim_lambda)
            _check_finite(loss, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
    return sh.detach()


def seed_variance_experiment(scene: SceneCapture, runs: int, mode: str, cfg: ProxyConfig,
                             epochs: int = 100, positions=None, init_sh_std: float = 0.5,
                             vanilla_lr: float = 0.01, grad_jitter: float = 1e-6) -> dict:
    """Repeat a fit `runs` times and record the summed SH coefficients per run.

    Seeds, data, positions, view order and hyper-parameters are identical across
    runs. On CPU that alone would give bit-identical runs, so each run draws its
    own gradient-accumulation jitter (see `_jitter_gradients`) from stream
    seed + 1000 + run. `grad_jitter=0` gives exact repeats.
    """
    if mode not in ("vanilla", "network"):
        raise ConfigError(f"unknown mode {mode!r}")
    if positions is None:
        positions = sample_positions(scene.surface, cfg.n_points, cfg.seed)
    pos = torch.as_tensor(np.asarray(positions), dtype=torch.float32)
    sums = []
    for r in range(runs):
        jitter_seed = cfg.seed + 1000 + r
        if mode == "vanilla":
            sh = _vanilla_fit(scene, pos, cfg, epochs, cfg.seed, init_sh_std, vanilla_lr, grad_jitter, jitter_seed)
        else:
            s, _ = stage1_overfit(scene, pos, cfg, epochs=epochs, seed=cfg.seed, grad_jitter=grad_jitter,
                                  jitter_seed=jitter_seed)
            sh = s.sh_coeffs
        sums.append(float(sh.double().sum()))
    arr = np.asarray(sums)
    return {"mode": mode, "runs": runs, "sums": sums, "std": float(arr.std()),
            "range": float(arr.max() - arr.min())}


def save_records(records: list, out_dir) -> list:
    """One HGDA file per scene and stage: <id>.stage1.hgda and, after stage 2, <id>.hgda."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for rec in records:
        save_set(rec.stage1_set, out / f"{rec.scene_id}.stage1.hgda")
        paths.append(out / f"{rec.scene_id}.stage1.hgda")
        if rec.unified_set is not None:
            save_set(rec.unified_set, out / f"{rec.scene_id}.hgda")
            paths.append(out / f"{rec.scene_id}.hgda")
    return paths


def load_records(out_dir, scene_ids: list | None = None) -> list:
    out = Path(out_dir)
    if scene_ids is None:
        scene_ids = sorted(p.name[:-len(".stage1.hgda")] for p in out.glob("*.stage1.hgda"))
    records = []
    for sid in scene_ids:
        s1 = load_set(out / f"{sid}.stage1.hgda")
        unified_path = out / f"{sid}.hgda"
        unified = load_set(unified_path) if unified_path.exists() else None
        records.append(ProxyGTRecord(sid, s1.positions, s1, unified))
    return records


def final_set(record: ProxyGTRecord) -> GaussianAttributeSet:
    return record.unified_set if record.unified_set is not None else record.stage1_set
