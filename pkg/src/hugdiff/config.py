"""Flat JSON pipeline configuration with desk and full-scale presets."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .proxygt import ProxyConfig

MODES = ("pixel", "attribute_regression", "attribute_diffusion")
CLI_MODES = {"pixel": "pixel", "attr-reg": "attribute_regression", "attr-diff": "attribute_diffusion"}
SEED_ENV = "HUGDIFF_SEED"


@dataclass
class PipelineConfig:
    dataset: str = "data"
    output_dir: str = "runs"
    scenes: list | None = None
    resolution: int = 64
    n_points: int = 200
    sh_degree: int = 1
    seed: int = 0
    sample_seed: int = 0
    # proxy ground truth
    k_neighbors: int = 4
    w_aux: float = 0.01
    ssim_lambda: float = 0.2
    scale_max: float = 0.1
    net_width: int = 64
    stage1_lr: float = 2e-4
    stage1_epochs: int = 500
    stage2_lr: float = 2e-4
    stage2_epochs: int = 300
    proxy_batch_size: int = 4
    # attribute models
    training_mode: str = "attribute_diffusion"
    encoder_channels: int = 8
    max_template_index: int = 512
    use_back_image: bool = True
    use_body_semantic: bool = True
    diffusion_T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    schedule_kind: str = "linear"
    diffusion_lr: float = 1e-3
    diffusion_steps: int = 2000
    diffusion_timesteps_per_item: int = 4
    head_lr: float = 1e-3
    head_steps: int = 2000
    noise_p_perturbed: float = 0.5
    noise_sigma: float = 0.05
    regression_lr: float = 1e-3
    regression_steps: int = 2000
    batch_size: int = 4
    # evaluation
    input_view: int = 0
    eval_positions: str = "proxy"
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def validate(self, check_paths: bool = True) -> "PipelineConfig":
        if self.training_mode not in MODES:
            raise ConfigError(f"training_mode must be one of {MODES}, got {self.training_mode!r}")
        if self.schedule_kind not in ("linear", "cosine"):
            raise ConfigError(f"schedule_kind must be linear or cosine, got {self.schedule_kind!r}")
        if self.eval_positions not in ("proxy", "depth"):
            raise ConfigError(f"eval_positions must be proxy or depth, got {self.eval_positions!r}")
        if not 0 <= self.sh_degree <= 3:
            raise ConfigError("sh_degree must be in [0, 3]")
        for name in ("n_points", "resolution", "diffusion_T", "batch_size", "proxy_batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("seed", "sample_seed"):
            if not isinstance(getattr(self, name), int):
                raise ConfigError(f"{name} must be an explicit integer")
        if not 1 <= self.diffusion_timesteps_per_item <= self.diffusion_T:
            raise ConfigError("diffusion_timesteps_per_item must lie in [1, diffusion_T]")
        if not 0 <= self.noise_p_perturbed <= 1:
            raise ConfigError("noise_p_perturbed must lie in [0, 1]")
        if check_paths and not Path(self.dataset).is_dir():
            raise ConfigError(f"dataset path does not exist: {self.dataset}")
        return self

    def proxy_config(self, stage: int = 1) -> ProxyConfig:
        return ProxyConfig(n_points=self.n_points, sh_degree=self.sh_degree, k_neighbors=self.k_neighbors,
                           w_aux=self.w_aux, ssim_lambda=self.ssim_lambda,
                           lr=self.stage1_lr if stage == 1 else self.stage2_lr,
                           stage1_epochs=self.stage1_epochs, stage2_epochs=self.stage2_epochs,
                           batch_size=self.proxy_batch_size, width=self.net_width, scale_max=self.scale_max,
                           seed=self.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        return config_hash(self.to_dict())

    @property
    def proxy_dir(self) -> Path:
        return Path(self.output_dir) / "proxy"


def config_hash(d: dict) -> str:
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def desk_config(**overrides) -> PipelineConfig:
    return dataclasses.replace(PipelineConfig(), **overrides)


def full_config(**overrides) -> PipelineConfig:
    """Full-scale settings: 512 px, 20000 points, 1000-step schedule, lr 2e-4, batch 4."""
    base = PipelineConfig(resolution=512, n_points=20000, stage1_lr=2e-4, stage1_epochs=4000, stage2_lr=2e-4,
                          stage2_epochs=1300, diffusion_T=1000, beta_start=1e-4, beta_end=0.02,
                          diffusion_lr=2e-4, diffusion_timesteps_per_item=1, head_lr=2e-4, regression_lr=2e-4, batch_size=4,
                          net_width=128, encoder_channels=32, max_template_index=6890)
    return dataclasses.replace(base, **overrides)


def from_dict(d: dict, check_paths: bool = True, env: dict | None = None) -> PipelineConfig:
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    d = dict(d)
    preset = d.pop("preset", "desk")
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    if preset not in ("desk", "full"):
        raise ConfigError(f"unknown preset {preset!r}")
    cfg = (full_config if preset == "full" else desk_config)(**d)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            cfg.seed = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return cfg.validate(check_paths)


def load_config(path, check_paths: bool = True, env: dict | None = None) -> PipelineConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError("config must be a JSON object")
    return from_dict(d, check_paths, env)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=1))
