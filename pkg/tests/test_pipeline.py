import dataclasses
import json
import math

import numpy as np
import pytest
import torch

from hugdiff import cli
from hugdiff.config import SEED_ENV, config_hash, desk_config, from_dict, load_config, full_config
from hugdiff.data import (ingest_dataset, read_depth, read_image, write_dataset, write_depth, write_image,
                          write_scene)
from hugdiff.errors import ConfigError, IngestError, ShapeError
from hugdiff.gaussians import load_set
from hugdiff.metrics import psnr, ssim
from hugdiff.pipeline import (EvalReport, build_models, evaluate_sets, held_out_views, load_model, run_eval,
                              run_training, validate_report)
from hugdiff.proxygt import build_proxy, stage2_unify
from hugdiff.toy import toy_dataset

from oracles import ssim_scalar

RES = 24


def tiny(tmp, **over):
    kw = dict(dataset=str(tmp / "data"), output_dir=str(tmp / "runs"), resolution=RES, n_points=60,
              stage1_epochs=15, stage2_epochs=3, stage1_lr=2e-3, stage2_lr=2e-3, diffusion_T=10,
              diffusion_steps=4, head_steps=4, regression_steps=4, net_width=16, encoder_channels=4,
              max_template_index=64, batch_size=2)
    kw.update(over)
    return desk_config(**kw)


@pytest.fixture(scope="module")
def scenes():
    return toy_dataset(2, n_views=4, resolution=RES)


@pytest.fixture(scope="module")
def proxy(scenes, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("proxy")
    cfg = tiny(tmp)
    records = build_proxy(scenes, cfg.proxy_config(1), "1")
    return cfg, records


# data ingestion

def test_ingest_roundtrip(scenes, tmp_path):
    write_dataset(scenes, tmp_path)
    back = ingest_dataset(tmp_path)
    assert [s.scene_id for s in back] == ["toy000", "toy001"]
    for a, b in zip(scenes, back):
        assert len(a.views) == len(b.views)
        assert torch.allclose(a.images, b.images, atol=0.5 / 255 + 1e-6)
        assert b.body_prior is not None


def test_ingest_resolution_mismatch_names_view(scenes, tmp_path):
    d = write_scene(scenes[0], tmp_path)
    write_image(torch.zeros(RES + 2, RES, 3), d / "images" / "view_002.png")
    with pytest.raises(IngestError, match="view 2"):
        ingest_dataset(tmp_path)


def test_ingest_missing_surface(scenes, tmp_path):
    d = write_scene(scenes[0], tmp_path)
    (d / "surface.obj").unlink()
    with pytest.raises(IngestError, match="surface"):
        ingest_dataset(tmp_path)


def test_ingest_unknown_scene_id(scenes, tmp_path):
    write_dataset(scenes, tmp_path)
    with pytest.raises(IngestError):
        ingest_dataset(tmp_path, ["toy999"])


def test_depth_io(tmp_path):
    depth = np.random.default_rng(0).uniform(0.5, 3.0, size=(7, 9))
    write_depth(depth, tmp_path / "d.png")
    assert np.abs(read_depth(tmp_path / "d.png") - depth).max() <= 0.0005 + 1e-12
    write_depth(depth, tmp_path / "d.bin")
    assert np.allclose(read_depth(tmp_path / "d.bin"), depth.astype(np.float32))


def test_image_io_quantization(tmp_path):
    img = torch.rand(5, 6, 3)
    write_image(img, tmp_path / "a.png")
    back = read_image(tmp_path / "a.png")
    assert (back - img).abs().max() <= 0.5 / 255 + 1e-6


# metrics

def test_psnr_examples():
    z = torch.zeros(8, 8, 3, dtype=torch.float64)
    assert psnr(z, z) == math.inf
    assert psnr(z, torch.full((8, 8, 3), 0.1, dtype=torch.float64)) == pytest.approx(20.0, abs=1e-9)
    assert psnr(z, torch.ones(8, 8, 3, dtype=torch.float64)) == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ShapeError):
        psnr(z, torch.zeros(8, 9, 3))


def test_psnr_symmetric():
    g = torch.Generator().manual_seed(0)
    a, b = torch.rand(10, 10, 3, generator=g), torch.rand(10, 10, 3, generator=g)
    assert psnr(a, b) == psnr(b, a)


def test_ssim_identical_is_one():
    a = torch.rand(20, 20, 3, generator=torch.Generator().manual_seed(1))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(16, 18, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
    assert ssim(a, b) == pytest.approx(ssim_scalar(a, b), abs=1e-10)
    assert ssim(a, 1 - a) == pytest.approx(ssim_scalar(a, 1 - a), abs=1e-10)
    assert ssim(a, 1 - a) < 0


def test_ssim_constant_images_closed_form():
    # flat images: only the luminance term survives, (2 mu_a mu_b + c1) / (mu_a^2 + mu_b^2 + c1)
    a, b = np.full((12, 12, 3), 0.25), np.full((12, 12, 3), 0.75)
    c1 = 0.01 ** 2
    expect = (2 * 0.25 * 0.75 + c1) / (0.25 ** 2 + 0.75 ** 2 + c1)
    assert ssim(a, b) == pytest.approx(expect, abs=1e-9)


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))


# configuration

def test_config_validation(tmp_path):
    (tmp_path / "data").mkdir()
    ok = {"dataset": str(tmp_path / "data")}
    assert from_dict(ok, env={}).training_mode == "attribute_diffusion"
    for bad in ({"training_mode": "gan"}, {"schedule_kind": "quadratic"}, {"n_points": 0}, {"seed": 1.5},
                {"sh_degree": 4}, {"nonsense": 1}, {"preset": "huge"}, {"noise_p_perturbed": 2.0}):
        with pytest.raises(ConfigError):
            from_dict({**ok, **bad}, env={})
    with pytest.raises(ConfigError, match="dataset"):
        from_dict({"dataset": str(tmp_path / "absent")}, env={})
    (tmp_path / "c.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


def test_seed_environment_override():
    assert from_dict({"seed": 3}, check_paths=False, env={SEED_ENV: "11"}).seed == 11
    assert from_dict({"seed": 3}, check_paths=False, env={}).seed == 3
    with pytest.raises(ConfigError):
        from_dict({}, check_paths=False, env={SEED_ENV: "x"})


def test_presets_and_hash():
    p = full_config()
    assert (p.resolution, p.n_points, p.diffusion_T, p.batch_size) == (512, 20000, 1000, 4)
    assert from_dict({"preset": "full"}, check_paths=False, env={}).n_points == 20000
    a, b = desk_config(), desk_config()
    assert a.hash() == b.hash() == config_hash(a.to_dict())
    assert desk_config(seed=1).hash() != a.hash()


# training and evaluation

def test_pixel_and_regression_models_match_in_size():
    count = lambda m: sum(p.numel() for p in m.parameters())
    pix = build_models(desk_config(training_mode="pixel"))["regressor"]
    reg = build_models(desk_config(training_mode="attribute_regression"))["regressor"]
    assert count(pix) == count(reg)


def test_attribute_modes_need_proxy(scenes, tmp_path):
    with pytest.raises(ConfigError, match="proxy"):
        run_training(tiny(tmp_path, training_mode="attribute_regression"), scenes, None, tmp_path)


@pytest.mark.parametrize("mode", ["pixel", "attribute_regression", "attribute_diffusion"])
def test_training_smoke_emits_checkpoint_and_report(mode, scenes, proxy, tmp_path):
    _, records = proxy
    cfg = tiny(tmp_path, training_mode=mode)
    res = run_training(cfg, scenes, records, tmp_path)
    assert res.checkpoint.exists() and (tmp_path / f"{mode}_log.json").exists()
    assert math.isfinite(res.final_loss)
    report = run_eval(res.checkpoint, scenes, records, out_dir=tmp_path / "eval")
    d = json.loads((tmp_path / "eval" / "eval.json").read_text())
    validate_report(d)
    assert d["mode"] == mode and d["config_hash"] == res.config_hash
    assert report.aggregate["n"] == sum(len(held_out_views(s)) for s in scenes)
    assert all(0 <= r["psnr"] and -1 <= r["ssim"] <= 1 for r in report.rows)


def test_training_deterministic(scenes, proxy, tmp_path):
    _, records = proxy
    cfg = tiny(tmp_path)
    a = run_training(cfg, scenes, records, tmp_path / "a")
    b = run_training(cfg, scenes, records, tmp_path / "b")
    assert a.final_loss == b.final_loss
    assert a.losses == b.losses


@pytest.fixture(scope="module")
def pixel_model(scenes, tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pix")
    res = run_training(tiny(tmp, training_mode="pixel", eval_positions="depth"), scenes, None, tmp)
    return load_model(res.checkpoint)


def test_eval_empty_view_list(scenes, pixel_model):
    report = run_eval(pixel_model, scenes, views=[])
    assert report.rows == [] and report.aggregate == {"n": 0, "psnr": None, "ssim": None}
    validate_report(report.to_dict())


def test_eval_missing_views_warn(scenes, pixel_model):
    report = run_eval(pixel_model, scenes, views=[1, 9])
    assert len(report.rows) == 2
    assert len(report.warnings) == 2 and all("view 9" in w for w in report.warnings)


def test_eval_aggregate_is_row_mean(scenes, pixel_model, tmp_path):
    report = run_eval(pixel_model, scenes, out_dir=tmp_path)
    rows = report.rows
    assert report.aggregate["psnr"] == pytest.approx(np.mean([r["psnr"] for r in rows]), abs=1e-9)
    assert report.aggregate["ssim"] == pytest.approx(np.mean([r["ssim"] for r in rows]), abs=1e-9)
    for sid, agg in report.per_scene.items():
        mine = [r["psnr"] for r in rows if r["scene"] == sid]
        assert agg["psnr"] == pytest.approx(np.mean(mine), abs=1e-9)
    back = EvalReport.from_dict(json.loads((tmp_path / "eval.json").read_text()))
    assert back.rows == report.rows and back.aggregate == report.aggregate
    assert "mean" in (tmp_path / "eval.txt").read_text()


def test_report_infinite_psnr_roundtrip():
    report = EvalReport([{"scene": "a", "view": 0, "psnr": math.inf, "ssim": 1.0}], 0.0, "h")
    d = json.loads(json.dumps(report.to_dict()))
    validate_report(d)
    assert EvalReport.from_dict(d).rows[0]["psnr"] == math.inf


def test_proxy_sets_score_near_training_psnr(scenes, proxy):
    cfg, records = proxy
    pc = dataclasses.replace(cfg.proxy_config(2), lr=1e-3)
    unified, tlog = stage2_unify(records, scenes, pc, epochs=30)
    report = evaluate_sets({s.scene_id: u for s, u in zip(scenes, unified)}, scenes, cfg=cfg, label="proxy")
    assert report.aggregate["psnr"] >= tlog.psnr[-1] - 0.5


# command line

def _write_cfg(tmp, **over):
    cfg = tiny(tmp, **over).to_dict()
    (tmp / "cfg.json").write_text(json.dumps(cfg))
    return str(tmp / "cfg.json")


def test_cli_end_to_end(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["toy-data", "--out", str(data), "--scenes", "2", "--views", "4", "--resolution", str(RES)]) == 0
    cfg = _write_cfg(tmp_path)
    assert cli.main(["build-proxy", "--config", cfg]) == 0
    proxy = tmp_path / "runs" / "proxy"
    assert (proxy / "stats.json").exists()
    assert cli.main(["train", "--config", cfg, "--mode", "attr-diff"]) == 0
    ckpt = tmp_path / "runs" / "attribute_diffusion.ckpt"
    assert ckpt.exists() and (tmp_path / "runs" / "eval.json").exists()
    out = tmp_path / "eval"
    assert cli.main(["eval", "--ckpt", str(ckpt), "--dataset", str(data), "--proxy", str(proxy),
                     "--views", "1,2", "--out", str(out)]) == 0
    assert len(json.loads((out / "eval.json").read_text())["rows"]) == 4
    scene = data / "scenes" / "toy000"
    pred = tmp_path / "pred.hgda"
    assert cli.main(["infer", "--ckpt", str(ckpt), "--image", str(scene / "images" / "view_000.png"),
                     "--camera", str(scene / "cameras.json"), "--scene", str(scene), "--out", str(pred),
                     "--ply", str(tmp_path / "pred.ply")]) == 0
    assert len(load_set(pred)) == 60 and (tmp_path / "pred.ply").exists()
    assert cli.main(["render", "--set", str(pred), "--camera", str(scene / "cameras.json"),
                     "--out", str(tmp_path / "r")]) == 0
    assert read_image(tmp_path / "r" / "view_003.png").shape == (RES, RES, 3)
    assert cli.main(["stats", "--sets", str(pred), str(pred), "--out", str(tmp_path / "s.json")]) == 0
    stats = json.loads((tmp_path / "s.json").read_text())
    assert stats["across_scene"]["sh_coeffs"]["var_overall_max"] == 0.0


def test_cli_exit_codes(tmp_path, scenes):
    (tmp_path / "bad.json").write_text(json.dumps({"training_mode": "gan"}))
    assert cli.main(["train", "--config", str(tmp_path / "bad.json")]) == 2
    d = write_scene(scenes[0], tmp_path / "data")
    cfg = _write_cfg(tmp_path)
    assert cli.main(["train", "--config", cfg, "--mode", "attr-reg"]) == 2  # no proxy yet
    write_image(torch.zeros(RES, RES + 1, 3), d / "images" / "view_001.png")
    assert cli.main(["build-proxy", "--config", cfg]) == 3
    write_image(scenes[0].images[1], d / "images" / "view_001.png")
    cfg = _write_cfg(tmp_path, training_mode="pixel", eval_positions="depth", regression_lr=1e30,
                     regression_steps=20)
    assert cli.main(["train", "--config", cfg]) == 4
