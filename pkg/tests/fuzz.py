"""Randomised output-validity sweep over every path that emits attribute sets."""
from __future__ import annotations

import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from hugdiff.conditioning import prepare_condition
from hugdiff.diffusion import AttributeDiffuser, DiffusionModels, ExtraStepHead, extra_step, infer_full, make_schedule
from hugdiff.errors import InvalidAttribute, NonFiniteFeatures, SamplingDiverged, StageError
from hugdiff.gaussians import RawAttributeSet, activate, load_set, random_set, save_set
from hugdiff.pipeline import AttributeRegressor
from hugdiff.proxygt import sample_positions
from hugdiff.render import render
from hugdiff.setnet import SetNetwork

PATHS = ("activate", "stage_network", "regressor", "diffusion", "extra_step", "io")
REJECTIONS = (NonFiniteFeatures, InvalidAttribute, SamplingDiverged)


def invariant_violations(s) -> list:
    """Checks written out from the definitions, independent of the package's own validator."""
    out = []
    n = s.positions.shape[0]
    d = 3 * (s.sh_degree + 1) ** 2
    shapes = {"positions": (n, 3), "opacities": (n,), "scales": (n, 3), "rotations": (n, 4), "sh_coeffs": (n, d)}
    for name, shape in shapes.items():
        t = getattr(s, name)
        if tuple(t.shape) != shape:
            out.append(f"{name} shape {tuple(t.shape)} != {shape}")
        elif not torch.isfinite(t).all():
            out.append(f"{name} not finite")
    if out:
        return out
    if not 0 <= s.sh_degree <= 3:
        out.append("sh degree out of range")
    if ((s.opacities < 0) | (s.opacities > 1)).any():
        out.append("opacity outside [0, 1]")
    if (s.scales <= 0).any():
        out.append("non-positive scale")
    tol = 1e-6 if s.rotations.dtype == torch.float64 else 1e-5
    if ((s.rotations.double().norm(dim=1) - 1).abs() > tol).any():
        out.append("rotation not unit")
    return out


@dataclass
class FuzzResult:
    emitted: int = 0
    rejected: int = 0
    failures: list = field(default_factory=list)
    per_path: dict = field(default_factory=dict)


def _scale_weights(module, rng):
    f = float(10 ** rng.uniform(-0.3, 0.4))
    with torch.no_grad():
        for p in module.parameters():
            p.mul_(f)
            p.add_(torch.randn(p.shape, generator=torch.Generator().manual_seed(int(rng.integers(1 << 30))))
                   * float(rng.uniform(0, 0.05)))


def _condition(rng, scenes):
    scene = scenes[int(rng.integers(len(scenes)))]
    n = int(rng.integers(8, 65))
    pos = sample_positions(scene.surface, n, int(rng.integers(1 << 30)))
    return scene, pos, prepare_condition(pos, scene.images[0], scene.views[0], scene, scene.body_prior)


def _trial(path, rng, scenes):
    deg = int(rng.integers(0, 4)) if path in ("activate", "io") else int(rng.integers(0, 3))
    d = 3 * (deg + 1) ** 2
    scale_max = float(rng.uniform(0.01, 1.0))
    torch.manual_seed(int(rng.integers(1 << 30)))
    if path == "activate":
        n = int(rng.integers(1, 200))
        dtype = torch.float64 if rng.random() < 0.5 else torch.float32
        mag = float(10 ** rng.uniform(-1, 2))
        g = torch.Generator().manual_seed(int(rng.integers(1 << 30)))
        r = lambda *shape: torch.randn(*shape, generator=g, dtype=dtype) * mag
        raw = RawAttributeSet(r(n, 3), r(n), r(n, 3), r(n, 4), r(n, d), deg)
        return [activate(raw, scale_max, straight_through=bool(rng.random() < 0.5))]
    if path == "stage_network":
        n = int(rng.integers(8, 120))
        pos = torch.as_tensor(rng.uniform(-0.5, 0.5, size=(n, 3)), dtype=torch.float32)
        net = SetNetwork(d, extra_dim=d if rng.random() < 0.5 else 0, width=16)
        _scale_weights(net, rng)
        extra = torch.randn(n, d) if net.extra_dim else None
        return [activate(net.raw_set(pos, net(pos, extra), deg), scale_max)]
    if path == "io":
        s = random_set(int(rng.integers(1, 100)), sh_degree=deg, seed=int(rng.integers(1 << 30)),
                       dtype=torch.float32)
        return [s, _roundtrip(s)]
    scene, pos, ci = _condition(rng, scenes)
    kw = dict(width=16, channels=4, max_index=64)
    if path == "regressor":
        reg = AttributeRegressor(d, init_scale=float(rng.uniform(0.005, 0.1)), **kw)
        _scale_weights(reg, rng)
        with torch.no_grad():
            return [reg(ci, scale_max)]
    head = ExtraStepHead(d, init_scale=float(rng.uniform(0.005, 0.1)), **kw)
    _scale_weights(head, rng)
    if path == "extra_step":
        c0 = torch.randn(len(pos), d) * float(10 ** rng.uniform(-1, 1.5))
        with torch.no_grad():
            return [extra_step(c0, ci, head, scale_max)]
    diffuser = AttributeDiffuser(d, **kw)
    _scale_weights(diffuser, rng)
    T = int(rng.integers(1, 7))
    sched = make_schedule(T, 1e-4, float(rng.uniform(0.02, 0.5)), "cosine" if rng.random() < 0.3 else "linear")
    dm = DiffusionModels(diffuser, head, sched, deg, scale_max)
    gt = pos if rng.random() < 0.5 else None
    n = int(rng.integers(8, 65))
    return [infer_full(scene.images[0], scene.views[0], dm, scene.body_prior, n, scene=scene,
                       seed=int(rng.integers(1 << 30)), gt_positions=gt)]


def _roundtrip(s):
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "s.hgda"
        save_set(s, p)
        return load_set(p)


def run_fuzz(n_trials: int, scenes, seed: int = 0, render_every: int = 10) -> FuzzResult:
    res = FuzzResult()
    for i in range(n_trials):
        path = PATHS[i % len(PATHS)]
        rng = np.random.default_rng([seed, i])
        stats = res.per_path.setdefault(path, [0, 0])
        try:
            sets = _trial(path, rng, scenes)
        except StageError as exc:
            if not isinstance(exc.cause, REJECTIONS):
                raise
            res.rejected += 1
            stats[1] += 1
            continue
        except REJECTIONS:
            res.rejected += 1
            stats[1] += 1
            continue
        for s in sets:
            bad = invariant_violations(s)
            if bad:
                res.failures.append((i, path, bad))
            if i % render_every == 0 and not bad and len(s) and scenes:
                with torch.no_grad():
                    img = render(s, scenes[0].views[int(rng.integers(len(scenes[0].views)))]).rgb
                if not (torch.isfinite(img).all() and img.min() >= 0 and img.max() <= 1):
                    res.failures.append((i, path, ["rendered image outside [0, 1]"]))
        res.emitted += len(sets)
        stats[0] += len(sets)
    return res
