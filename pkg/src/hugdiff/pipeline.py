"""Training modes, evaluation and reports.

Three ways to train a single-view model on the same conditioning:
  pixel                 regress attributes, supervise renders against the captured views
  attribute_regression  regress attributes, supervise them directly with the proxy ground truth
  attribute_diffusion   diffuse SH, then complete the set with the extra-step head
The two regression modes use the same AttributeRegressor class.
"""
from __future__ import annotations

import json
import logging
import math
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .conditioning import ConditionInputs, ConditionNet, generate_positions, prepare_condition
from .config import PipelineConfig, config_hash
from .diffusion import (AttributeDiffuser, DiffusionModels, ExtraStepHead, NoisePolicy, completion_loss,
                        extra_step, infer_full, load_checkpoint, make_schedule, sample_sh, save_checkpoint,
                        train_extra_step, train_step_sh)
from .errors import ConfigError, InvalidAttribute, NonFiniteFeatures, TrainingDiverged
from .gaussians import GaussianAttributeSet, RawAttributeSet, activate, sh_degree_from_dim, sh_dim
from .geometry import kdist
from .metrics import psnr, ssim
from .proxygt import final_set, sample_positions
from .render import photometric_value, render
from .setnet import SetNetwork
from .surface import raycast_depth

log = logging.getLogger(__name__)


class AttributeRegressor(nn.Module):
    """Conditioning features to a full attribute set in one pass."""

    def __init__(self, sh_dim: int, width: int = 64, channels: int = 8, max_index: int = 512,
                 init_opacity: float = 0.9, init_scale: float = 0.02, use_back: bool = True,
                 use_semantic: bool = True):
        super().__init__()
        self.sh_dim = sh_dim
        self.cond = ConditionNet(channels, max_index, use_back=use_back, use_semantic=use_semantic)
        self.net = SetNetwork(sh_dim, extra_dim=self.cond.out_dim, width=width)
        self.net.set_output_bias(init_opacity, init_scale)

    def forward(self, ci: ConditionInputs, scale_max: float = 0.1) -> GaussianAttributeSet:
        features = self.cond(ci).features()
        pos = ci.positions.to(features.dtype)
        out = self.net(pos, features, ci.hier)
        raw = RawAttributeSet(pos, out["opacity_raw"], out["scale_raw"], out["rotation_raw"], out["sh"],
                              sh_degree_from_dim(self.sh_dim))
        return activate(raw, scale_max)


def build_models(cfg: PipelineConfig, init_scale: float = 0.02) -> dict:
    d = sh_dim(cfg.sh_degree)
    common = dict(width=cfg.net_width, channels=cfg.encoder_channels, max_index=cfg.max_template_index,
                  use_back=cfg.use_back_image, use_semantic=cfg.use_body_semantic)
    if cfg.training_mode == "attribute_diffusion":
        return {"diffuser": AttributeDiffuser(d, **common),
                "head": ExtraStepHead(d, init_scale=init_scale, **common)}
    return {"regressor": AttributeRegressor(d, init_scale=init_scale, **common)}


def schedule_of(cfg: PipelineConfig):
    return make_schedule(cfg.diffusion_T, cfg.beta_start, cfg.beta_end, cfg.schedule_kind)


@dataclass
class SceneItem:
    scene: object
    positions: torch.Tensor
    target: GaussianAttributeSet | None
    ci: ConditionInputs


def prepare_items(cfg: PipelineConfig, scenes: list, records: list | None) -> list:
    by_id = {r.scene_id: r for r in records or []}
    items = []
    for j, scene in enumerate(scenes):
        if scene.body_prior is None:
            raise ConfigError(f"scene {scene.scene_id} has no body prior")
        if not 0 <= cfg.input_view < len(scene.views):
            raise ConfigError(f"input view {cfg.input_view} missing in scene {scene.scene_id}")
        rec = by_id.get(scene.scene_id)
        target = None if rec is None else final_set(rec)
        if target is not None:
            pos = target.positions.float()
        else:
            pos = torch.as_tensor(sample_positions(scene.surface, cfg.n_points, cfg.seed + j), dtype=torch.float32)
        ci = prepare_condition(pos, scene.images[cfg.input_view], scene.views[cfg.input_view], scene,
                               scene.body_prior)
        items.append(SceneItem(scene, pos, None if target is None else target.to(torch.float32), ci))
    return items


@dataclass
class TrainResult:
    mode: str
    checkpoint: Path
    losses: dict = field(default_factory=dict)
    config_hash: str = ""

    @property
    def final_loss(self) -> float:
        last = list(self.losses.values())[-1]
        return float(last[-1]) if last else float("nan")


def _check(loss, step):
    if not torch.isfinite(loss):
        raise TrainingDiverged("non-finite loss", step)


@contextmanager
def _diverges_at(step):
    """Blown-up weights surface as invalid features or attributes in the forward pass."""
    try:
        yield
    except (NonFiniteFeatures, InvalidAttribute) as exc:
        raise TrainingDiverged(f"non-finite forward pass ({exc})", step) from exc


def _check_params(module: nn.Module, step):
    if not all(torch.isfinite(p).all() for p in module.parameters()):
        raise TrainingDiverged("non-finite parameters after update", step)


def _batches(rng: np.random.Generator, n_items: int, batch_size: int):
    while True:
        yield rng.choice(n_items, size=min(batch_size, n_items), replace=False)


def run_training(cfg: PipelineConfig, scenes: list, records: list | None = None, out_dir=None,
                 log_every: int = 100) -> TrainResult:
    mode = cfg.training_mode
    if mode != "pixel":
        have = {r.scene_id for r in records or []}
        missing = [s.scene_id for s in scenes if s.scene_id not in have]
        if missing:
            raise ConfigError(f"{mode} needs proxy ground truth; missing for {missing}")
    if not scenes:
        raise ConfigError("no scenes to train on")
    items = prepare_items(cfg, scenes, records)
    spacing = float(np.mean([kdist(it.positions, cfg.k_neighbors).mean() for it in items]))
    torch.manual_seed(cfg.seed)
    models = build_models(cfg, init_scale=min(spacing, 0.5 * cfg.scale_max))
    g = torch.Generator().manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    losses: dict = {}
    sched = None
    if mode == "attribute_diffusion":
        sched = schedule_of(cfg)
        losses["diffusion"] = _train_diffuser(cfg, items, models["diffuser"], sched, g, rng, log_every)
        models["diffuser"].eval()
        cached = [sample_sh(it.ci, models["diffuser"], sched, cfg.sample_seed + j) for j, it in enumerate(items)]
        losses["extra_step"] = _train_head(cfg, items, models["head"], cached, g, rng, log_every)
    else:
        losses[mode] = _train_regressor(cfg, items, models["regressor"], rng, log_every)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / f"{mode}.ckpt"
    h = cfg.hash()
    save_checkpoint(ckpt, models, cfg.to_dict(), sched, {"mode": mode, "config_hash": h})
    (out / f"{mode}_log.json").write_text(json.dumps({"config_hash": h, "losses": losses}))
    return TrainResult(mode, ckpt, losses, h)


def _train_diffuser(cfg, items, diffuser, sched, g, rng, log_every):
    opt = torch.optim.Adam(diffuser.parameters(), lr=cfg.diffusion_lr)
    hist = []
    batches = _batches(rng, len(items), cfg.batch_size)
    for step in range(1, cfg.diffusion_steps + 1):
        batch = [(items[j].target.sh_coeffs, items[j].ci) for j in next(batches)]
        opt.zero_grad()
        with _diverges_at(step):
            loss = train_step_sh(batch, diffuser, sched, g, cfg.diffusion_timesteps_per_item)
        _check(loss, step)
        opt.step()
        _check_params(diffuser, step)
        hist.append(float(loss))
        if step % log_every == 0:
            log.info("diffusion step %d loss %.5f", step, np.mean(hist[-log_every:]))
    return hist


def _train_head(cfg, items, head, cached, g, rng, log_every):
    opt = torch.optim.Adam(head.parameters(), lr=cfg.head_lr)
    policy = NoisePolicy(cfg.noise_p_perturbed, cfg.noise_sigma)
    hist = []
    batches = _batches(rng, len(items), cfg.batch_size)
    for step in range(1, cfg.head_steps + 1):
        batch = [(items[j].target, items[j].ci, cached[j]) for j in next(batches)]
        opt.zero_grad()
        with _diverges_at(step):
            loss = train_extra_step(batch, head, policy, g, cfg.scale_max)
        _check(loss, step)
        opt.step()
        _check_params(head, step)
        hist.append(float(loss))
        if step % log_every == 0:
            log.info("extra step %d loss %.5f", step, np.mean(hist[-log_every:]))
    return hist


def _train_regressor(cfg, items, reg, rng, log_every):
    opt = torch.optim.Adam(reg.parameters(), lr=cfg.regression_lr)
    hist = []
    batches = _batches(rng, len(items), cfg.batch_size)
    for step in range(1, cfg.regression_steps + 1):
        terms = []
        for j in next(batches):
            it = items[j]
            with _diverges_at(step):
                pred = reg(it.ci, cfg.scale_max)
            if cfg.training_mode == "pixel":
                k = int(rng.integers(len(it.scene.views)))
                img = render(pred, it.scene.views[k])
                terms.append(photometric_value(img.rgb, it.scene.images[k].to(img.rgb.dtype), cfg.ssim_lambda))
            else:
                terms.append(completion_loss(pred, it.target))
        loss = torch.stack(terms).mean()
        _check(loss, step)
        opt.zero_grad()
        loss.backward()
        opt.step()
        _check_params(reg, step)
        hist.append(float(loss.detach()))
        if step % log_every == 0:
            log.info("%s step %d loss %.5f", cfg.training_mode, step, np.mean(hist[-log_every:]))
    return hist


# ---------------------------------------------------------------- inference and evaluation

@dataclass
class LoadedModel:
    cfg: PipelineConfig
    modules: dict
    schedule: object = None

    @property
    def mode(self) -> str:
        return self.cfg.training_mode


def load_model(path) -> LoadedModel:
    blob = load_checkpoint(path)
    cfg = PipelineConfig(**blob["config"])
    modules = build_models(cfg)
    for name, m in modules.items():
        m.load_state_dict(blob["state_dicts"][name])
        m.eval()
    return LoadedModel(cfg, modules, blob.get("schedule"))


def predict_set(model: LoadedModel, scene, record=None, positions: str | None = None,
                seed: int | None = None) -> GaussianAttributeSet:
    cfg = model.cfg
    k = cfg.input_view
    cam, image = scene.views[k], scene.images[k]
    where = positions or cfg.eval_positions
    gt = None
    if where == "proxy":
        if record is None:
            raise ConfigError(f"proxy positions requested but no proxy ground truth for {scene.scene_id}")
        gt = final_set(record).positions.float()
    seed = cfg.sample_seed if seed is None else seed
    if model.mode == "attribute_diffusion":
        dm = DiffusionModels(model.modules["diffuser"], model.modules["head"], model.schedule, cfg.sh_degree,
                             cfg.scale_max)
        depth = None if gt is not None else raycast_depth(scene.surface, cam)
        return infer_full(image, cam, dm, scene.body_prior, cfg.n_points, depth=depth, scene=scene, seed=seed,
                          gt_positions=gt)
    if gt is None:
        gt = torch.as_tensor(generate_positions(cam, raycast_depth(scene.surface, cam), scene.body_prior,
                                                cfg.n_points), dtype=torch.float32)
    ci = prepare_condition(gt, image, cam, scene, scene.body_prior)
    with torch.no_grad():
        return model.modules["regressor"](ci, cfg.scale_max).detach()


REPORT_SCHEMA = {
    "type": "object",
    "required": ["rows", "per_scene", "aggregate", "runtime_s", "config_hash", "warnings", "lpips"],
    "properties": {
        "rows": {"type": "array", "items": {
            "type": "object", "required": ["scene", "view", "psnr", "ssim"],
            "properties": {"scene": {"type": "string"}, "view": {"type": "integer", "minimum": 0},
                           "psnr": {"anyOf": [{"type": "number"}, {"const": "inf"}]},
                           "ssim": {"type": "number", "minimum": -1, "maximum": 1}}}},
        "per_scene": {"type": "object"},
        "aggregate": {"type": "object", "required": ["n", "psnr", "ssim"]},
        "runtime_s": {"type": "number", "minimum": 0},
        "config_hash": {"type": "string"},
        "mode": {"type": "string"},
        "warnings": {"type": "array", "items": {"type": "string"}},
        "lpips": {"type": ["number", "null"]},
    },
}


def _enc(x: float):
    return "inf" if x == math.inf else x


def _dec(x):
    return math.inf if x == "inf" else float(x)


def _mean(vals):
    return float(np.mean(vals)) if vals else None


@dataclass
class EvalReport:
    rows: list
    runtime_s: float
    config_hash: str
    mode: str = ""
    warnings: list = field(default_factory=list)
    lpips: float | None = None

    @property
    def aggregate(self) -> dict:
        return {"n": len(self.rows), "psnr": _mean([r["psnr"] for r in self.rows]),
                "ssim": _mean([r["ssim"] for r in self.rows])}

    @property
    def per_scene(self) -> dict:
        out = {}
        for sid in dict.fromkeys(r["scene"] for r in self.rows):
            rs = [r for r in self.rows if r["scene"] == sid]
            out[sid] = {"n": len(rs), "psnr": _mean([r["psnr"] for r in rs]), "ssim": _mean([r["ssim"] for r in rs])}
        return out

    def to_dict(self) -> dict:
        agg = dict(self.aggregate)
        agg["psnr"] = None if agg["psnr"] is None else _enc(agg["psnr"])
        per_scene = {k: {**v, "psnr": _enc(v["psnr"])} for k, v in self.per_scene.items()}
        return {"rows": [{**r, "psnr": _enc(r["psnr"])} for r in self.rows], "per_scene": per_scene,
                "aggregate": agg, "runtime_s": self.runtime_s, "config_hash": self.config_hash,
                "mode": self.mode, "warnings": list(self.warnings), "lpips": self.lpips}

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        validate_report(d)
        rows = [{**r, "psnr": _dec(r["psnr"])} for r in d["rows"]]
        return cls(rows, d["runtime_s"], d["config_hash"], d.get("mode", ""), d["warnings"], d["lpips"])

    def table(self) -> str:
        lines = [f"{'scene':<16}{'view':>6}{'PSNR':>10}{'SSIM':>9}"]
        for r in self.rows:
            lines.append(f"{r['scene']:<16}{r['view']:>6}{r['psnr']:>10.3f}{r['ssim']:>9.4f}")
        agg = self.aggregate
        if agg["n"]:
            lines.append(f"{'mean':<16}{agg['n']:>6}{agg['psnr']:>10.3f}{agg['ssim']:>9.4f}")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        lines.append(f"config {self.config_hash}  runtime {self.runtime_s:.1f}s")
        return "\n".join(lines)

    def write(self, out_dir, stem: str = "eval") -> tuple:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        d = self.to_dict()
        validate_report(d)
        (out / f"{stem}.json").write_text(json.dumps(d, indent=1))
        (out / f"{stem}.txt").write_text(self.table() + "\n")
        return out / f"{stem}.json", out / f"{stem}.txt"


def validate_report(d: dict) -> None:
    import jsonschema
    jsonschema.validate(d, REPORT_SCHEMA)


def score_views(attrs: GaussianAttributeSet, scene, views, cfg: PipelineConfig | None = None, warnings=None) -> list:
    window = 11 if cfg is None else cfg.ssim_window
    sigma = 1.5 if cfg is None else cfg.ssim_sigma
    rows = []
    for k in views:
        if not 0 <= k < len(scene.views):
            if warnings is not None:
                warnings.append(f"scene {scene.scene_id}: view {k} missing, skipped")
            continue
        with torch.no_grad():
            img = render(attrs, scene.views[k]).rgb
        gt = scene.images[k].to(img.dtype)
        rows.append({"scene": scene.scene_id, "view": int(k), "psnr": psnr(img, gt),
                     "ssim": float(ssim(img, gt, window=window, sigma=sigma))})
    return rows


def held_out_views(scene, input_view: int = 0) -> list:
    return [k for k in range(len(scene.views)) if k != input_view]


def run_eval(checkpoint, scenes: list, records: list | None = None, views: list | None = None, out_dir=None,
             positions: str | None = None) -> EvalReport:
    """Infer each scene from its input view and score the requested (default: held-out) views."""
    t0 = time.perf_counter()
    model = load_model(checkpoint) if not isinstance(checkpoint, LoadedModel) else checkpoint
    by_id = {r.scene_id: r for r in records or []}
    rows, warnings = [], []
    for scene in scenes:
        want = held_out_views(scene, model.cfg.input_view) if views is None else list(views)
        if not want:
            continue
        attrs = predict_set(model, scene, by_id.get(scene.scene_id), positions)
        rows += score_views(attrs, scene, want, model.cfg, warnings)
    report = EvalReport(rows, time.perf_counter() - t0, model.cfg.hash(), model.mode, warnings)
    if out_dir is not None:
        report.write(out_dir)
    return report


def evaluate_sets(sets: dict, scenes: list, views: list | None = None, cfg: PipelineConfig | None = None,
                  label: str = "sets") -> EvalReport:
    """Score given attribute sets (keyed by scene id) directly, e.g. the proxy ground truth."""
    t0 = time.perf_counter()
    rows, warnings = [], []
    for scene in scenes:
        if scene.scene_id not in sets:
            warnings.append(f"scene {scene.scene_id}: no attribute set, skipped")
            continue
        want = list(range(len(scene.views))) if views is None else list(views)
        rows += score_views(sets[scene.scene_id], scene, want, cfg, warnings)
    h = config_hash(cfg.to_dict()) if cfg is not None else ""
    return EvalReport(rows, time.perf_counter() - t0, h, label, warnings)
