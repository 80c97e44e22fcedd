"""Conditional diffusion over per-point SH coefficients and the one-shot completion head.

The diffuser predicts the noise in a noisy SH set given positions and the
per-point conditioning. A separate head then removes residual noise from the
sampled coefficients and regresses opacity, scale and rotation. The two models
own separate conditioning networks, so the completion loss never reaches the
diffuser's parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionInputs, ConditionNet, generate_positions, prepare_condition
from .errors import MissingCondition, SamplingDiverged, ScheduleError, ShapeError, StageError
from .gaussians import GaussianAttributeSet, RawAttributeSet, activate, sh_degree_from_dim
from .geometry import lex_rank
from .setnet import SetNetwork, timestep_embedding

CHECKPOINT_VERSION = 1
T_EMBED_DIM = 128


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    T: int
    betas: np.ndarray
    kind: str = "linear"

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        """Cumulative products with alpha_bar[0] = 1 prepended, indexed by t in [0, T]."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[t])

    @property
    def terminal_alpha_bar(self) -> float:
        return float(self.alpha_bars[-1])

    def posterior_variance(self, t: int) -> float:
        ab = self.alpha_bars
        return float((1 - ab[t - 1]) / (1 - ab[t]) * self.betas[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "betas": self.betas.tolist(), "kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "DiffusionSchedule":
        return cls(int(d["T"]), np.asarray(d["betas"], dtype=np.float64), d.get("kind", "linear"))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear",
                  cosine_offset: float = 0.008) -> DiffusionSchedule:
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start <= beta_end < 1):
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    if kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        s = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((s + cosine_offset) / (1 + cosine_offset) * math.pi / 2) ** 2
        betas = np.clip(1 - f[1:] / f[:-1], beta_start, 0.999)
    else:
        raise ScheduleError(f"unknown schedule kind {kind!r}")
    if np.any(np.diff(betas) < 0) or betas.min() <= 0 or betas.max() >= 1:
        raise ScheduleError("betas must be non-decreasing and inside (0, 1)")
    return DiffusionSchedule(T, betas, kind)


def desk_schedule(T: int = 100, kind: str = "linear") -> DiffusionSchedule:
    """Short schedule whose betas are stretched so that alpha_bar_T stays near zero."""
    stretch = 1000.0 / T
    return make_schedule(T, 1e-4 * stretch, min(0.02 * stretch, 0.999), kind)


def _check_t(t, sched: DiffusionSchedule) -> int:
    if int(t) != t or not 1 <= t <= sched.T:
        raise IndexError(f"timestep {t} outside [1, {sched.T}]")
    return int(t)


def q_sample(c0: torch.Tensor, t: int, noise: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    t = _check_t(t, sched)
    ab = sched.alpha_bar(t)
    return math.sqrt(ab) * c0 + math.sqrt(1 - ab) * noise


def predict_start(ct: torch.Tensor, t: int, eps: torch.Tensor, sched: DiffusionSchedule) -> torch.Tensor:
    t = _check_t(t, sched)
    ab = sched.alpha_bar(t)
    return (ct - math.sqrt(1 - ab) * eps) / math.sqrt(ab)


def posterior_mean(ct: torch.Tensor, c0: torch.Tensor, t: int, sched: DiffusionSchedule) -> torch.Tensor:
    t = _check_t(t, sched)
    ab = sched.alpha_bars
    beta = sched.betas[t - 1]
    coef0 = beta * math.sqrt(ab[t - 1]) / (1 - ab[t])
    coeft = (1 - ab[t - 1]) * math.sqrt(1 - beta) / (1 - ab[t])
    return coef0 * c0 + coeft * ct


def canonical_noise(positions, shape, generator: torch.Generator, dtype=torch.float32) -> torch.Tensor:
    """Standard normal rows assigned by lexicographic rank of the positions, so permuting points permutes noise."""
    z = torch.randn(shape, generator=generator, dtype=torch.float64).to(dtype)
    return z[torch.as_tensor(lex_rank(positions))]


class AttributeDiffuser(nn.Module):
    """Noise predictor over SH sets.

    The prediction is sqrt(1 - alpha_bar_t) * c_t plus a learned residual. With
    the residual at its zero initialisation this is the exact denoiser for unit
    Gaussian data, so an untrained model already samples unit-variance sets.
    """

    def __init__(self, sh_dim: int, width: int = 64, channels: int = 8, max_index: int = 512,
                 t_dim: int = T_EMBED_DIM, use_back: bool = True, use_semantic: bool = True):
        super().__init__()
        self.sh_dim = sh_dim
        self.t_dim = t_dim
        self.cond = ConditionNet(channels, max_index, use_back=use_back, use_semantic=use_semantic)
        self.net = SetNetwork(sh_dim, extra_dim=sh_dim + self.cond.out_dim, width=width, t_dim=t_dim,
                              geometry_heads=False)

    def forward(self, ct: torch.Tensor, t: int, ci: ConditionInputs, sched: DiffusionSchedule,
                features: torch.Tensor | None = None) -> torch.Tensor:
        if ct.shape != (ci.positions.shape[0], self.sh_dim):
            raise ShapeError(f"noisy set shape {tuple(ct.shape)} != ({ci.positions.shape[0]}, {self.sh_dim})")
        if features is None:
            features = self.cond(ci).features()
        pos = ci.positions.to(ct.dtype)
        temb = timestep_embedding(t, self.t_dim, ct.dtype)
        out = self.net(pos, torch.cat([ct, features.to(ct.dtype)], -1), ci.hier, temb)["sh"]
        return math.sqrt(1 - sched.alpha_bar(t)) * ct + out


def _require_condition(ci):
    if ci is None:
        raise MissingCondition("scene has no conditioning bundle")
    return ci


def draw_timesteps(T: int, k: int, generator: torch.Generator) -> list:
    """k timesteps, one uniform draw from each of k equal strata of 1..T (plain uniform when k == 1)."""
    edges = np.linspace(0, T, k + 1)
    out = []
    for j in range(k):
        lo, hi = int(edges[j]) + 1, max(int(edges[j + 1]), int(edges[j]) + 1)
        out.append(int(torch.randint(lo, hi + 1, (1,), generator=generator)))
    return out


def train_step_sh(batch, diffuser, sched: DiffusionSchedule, generator: torch.Generator,
                  timesteps_per_item: int = 1) -> torch.Tensor:
    """Noise-prediction loss averaged over the batch; gradients are accumulated into the diffuser.

    `batch` holds (target SH (N, d), ConditionInputs) pairs. Each pair is noised at
    `timesteps_per_item` stratified timesteps, which lowers the gradient variance per step.
    """
    if not 1 <= timesteps_per_item <= sched.T:
        raise ValueError(f"timesteps_per_item must lie in [1, {sched.T}]")
    losses = []
    for target, ci in batch:
        ci = _require_condition(ci)
        for t in draw_timesteps(sched.T, timesteps_per_item, generator):
            noise = torch.randn(target.shape, generator=generator, dtype=torch.float64).to(target.dtype)
            ct = q_sample(target, t, noise, sched)
            losses.append(((diffuser(ct, t, ci, sched) - noise) ** 2).mean())
    loss = torch.stack(losses).mean()
    if loss.requires_grad:
        loss.backward()
    return loss.detach()


@torch.no_grad()
def sample_sh(ci: ConditionInputs, diffuser: AttributeDiffuser, sched: DiffusionSchedule, seed: int = 0,
              dtype=torch.float32) -> torch.Tensor:
    """Ancestral sampling from c_T ~ N(0, I) to c_0; deterministic per seed and point-order equivariant."""
    ci = _require_condition(ci)
    g = torch.Generator().manual_seed(int(seed))
    shape = (ci.positions.shape[0], diffuser.sh_dim)
    features = diffuser.cond(ci).features()
    ct = canonical_noise(ci.positions, shape, g, dtype)
    for t in range(sched.T, 0, -1):
        eps = diffuser(ct, t, ci, sched, features)
        c0 = predict_start(ct, t, eps, sched)
        mean = posterior_mean(ct, c0, t, sched)
        if t > 1:
            z = canonical_noise(ci.positions, shape, g, dtype)
            ct = mean + math.sqrt(sched.posterior_variance(t)) * z
        else:
            ct = mean
        if not torch.isfinite(ct).all():
            raise SamplingDiverged("non-finite value during sampling", t)
    return ct


class ExtraStepHead(nn.Module):
    """Residual-noise and opacity/scale/rotation predictor on top of sampled SH."""

    def __init__(self, sh_dim: int, width: int = 64, channels: int = 8, max_index: int = 512,
                 init_opacity: float = 0.9, init_scale: float = 0.02, use_back: bool = True,
                 use_semantic: bool = True):
        super().__init__()
        self.sh_dim = sh_dim
        self.cond = ConditionNet(channels, max_index, use_back=use_back, use_semantic=use_semantic)
        self.net = SetNetwork(sh_dim, extra_dim=sh_dim + self.cond.out_dim, width=width)
        self.net.set_output_bias(init_opacity, init_scale)

    def forward(self, c0: torch.Tensor, ci: ConditionInputs) -> dict:
        if c0.shape != (ci.positions.shape[0], self.sh_dim):
            raise ShapeError(f"SH set shape {tuple(c0.shape)} != ({ci.positions.shape[0]}, {self.sh_dim})")
        features = self.cond(ci).features().to(c0.dtype)
        out = self.net(ci.positions.to(c0.dtype), torch.cat([c0, features], -1), ci.hier)
        out["residual"] = out.pop("sh")
        return out


def extra_step(c0: torch.Tensor, ci: ConditionInputs, head: ExtraStepHead, scale_max: float = 0.1,
               differentiable: bool = False) -> GaussianAttributeSet:
    out = head(c0, ci)
    raw = RawAttributeSet(ci.positions.to(c0.dtype), out["opacity_raw"], out["scale_raw"], out["rotation_raw"],
                          c0 - out["residual"], sh_degree_from_dim(c0.shape[1]))
    if differentiable:
        return activate(raw, scale_max, straight_through=True)
    return activate(raw, scale_max).detach()


@dataclass
class NoisePolicy:
    """Training-time source of c0 for the completion head.

    With probability `p_perturbed` (or when no cached diffuser sample exists) the
    target SH plus N(0, sigma^2) noise is used, otherwise the cached sample.
    """

    p_perturbed: float = 0.5
    sigma: float = 0.05

    def draw(self, target_sh: torch.Tensor, cached: torch.Tensor | None, generator: torch.Generator):
        u = float(torch.rand((), generator=generator))
        noise = torch.randn(target_sh.shape, generator=generator, dtype=torch.float64).to(target_sh.dtype)
        if cached is None or u < self.p_perturbed:
            return target_sh + self.sigma * noise
        return cached.to(target_sh.dtype)


def align_quaternions(q: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    sign = torch.where((q * ref).sum(-1, keepdim=True) < 0, -1.0, 1.0).to(q.dtype)
    return q * sign


def completion_loss(pred: GaussianAttributeSet, target: GaussianAttributeSet) -> torch.Tensor:
    """Unweighted sum of the four per-attribute mean-squared errors."""
    q = align_quaternions(pred.rotations, target.rotations)
    return (((pred.sh_coeffs - target.sh_coeffs) ** 2).mean()
            + ((pred.opacities - target.opacities) ** 2).mean()
            + ((pred.scales - target.scales) ** 2).mean()
            + ((q - target.rotations) ** 2).mean())


def train_extra_step(batch, head: ExtraStepHead, noise_policy: NoisePolicy, generator: torch.Generator,
                     scale_max: float = 0.1) -> torch.Tensor:
    """`batch` holds (target set, ConditionInputs, cached diffuser sample or None) triples."""
    losses = []
    for target, ci, cached in batch:
        ci = _require_condition(ci)
        c0 = noise_policy.draw(target.sh_coeffs, cached, generator)
        pred = extra_step(c0, ci, head, scale_max, differentiable=True)
        losses.append(completion_loss(pred, target))
    loss = torch.stack(losses).mean()
    if loss.requires_grad:
        loss.backward()
    return loss.detach()


@dataclass
class DiffusionModels:
    diffuser: AttributeDiffuser
    head: ExtraStepHead
    schedule: DiffusionSchedule
    sh_degree: int
    scale_max: float = 0.1
    config: dict = field(default_factory=dict)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StageError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage label
        raise StageError(name, exc) from exc


def infer_full(image, cam, models: DiffusionModels, body_prior, n_points: int, depth=None, scene=None,
               provider=None, seed: int = 0, gt_positions=None) -> GaussianAttributeSet:
    """Single image to full attribute set: positions, conditioning, SH sampling, completion."""
    if depth is None and gt_positions is None:
        from .surface import raycast_depth
        depth = _stage("depth", raycast_depth, getattr(scene, "surface", None), cam)
    pos = _stage("positions", generate_positions, cam, depth, body_prior, n_points, gt_positions=gt_positions)
    ci = _stage("conditioning", prepare_condition, pos, image, cam, scene, body_prior, provider)
    with torch.no_grad():
        c0 = _stage("sampling", sample_sh, ci, models.diffuser, models.schedule, seed)
        return _stage("completion", extra_step, c0, ci, models.head, models.scale_max)


def save_checkpoint(path, modules: dict, config: dict, schedule: DiffusionSchedule | None = None,
                    extra: dict | None = None) -> None:
    blob = {"version": CHECKPOINT_VERSION, "config": config,
            "schedule": None if schedule is None else schedule.to_dict(),
            "state_dicts": {name: m.state_dict() for name, m in modules.items()}}
    if extra:
        blob["extra"] = extra
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(blob, path)


def load_checkpoint(path) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(blob, dict) or "version" not in blob:
        raise ValueError(f"{path}: not a checkpoint (missing version)")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {blob['version']}")
    if blob.get("schedule") is not None:
        blob["schedule"] = DiffusionSchedule.from_dict(blob["schedule"])
    return blob
