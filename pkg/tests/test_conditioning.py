import math

import numpy as np
import pytest
import torch

from hugdiff.camera import CameraView, orbit_cameras
from hugdiff.conditioning import (BodyEmbedder, BodyPrior, ConditionNet, GroundTruthBackView, ImageEncoder,
                                  back_view_provider, body_semantic_features, generate_positions,
                                  load_body_prior, mirrored_camera, nearest_template, partition_visibility,
                                  pixel_aligned_features, prepare_condition, sample_maps, save_body_prior,
                                  segment_parts)
from hugdiff.errors import EmptyDepth, IngestError, MissingBackView
from hugdiff.geometry import chamfer, kdist
from hugdiff.proxygt import sample_positions
from hugdiff.surface import PointSurface, ellipsoid_mesh, raycast_depth, render_surface
from hugdiff.toy import fibonacci_sphere, textured_sphere, toy_body_prior, toy_scene

from oracles import brute_nearest, sphere_visibility


def sphere_prior(r=0.4, m=256):
    return toy_body_prior((r, r, r), (0, 0, 0), m)


@pytest.fixture(scope="module")
def sphere():
    return textured_sphere(n_views=4, resolution=32)


# ---- body prior ----------------------------------------------------------

def test_body_prior_validation_and_io(tmp_path):
    p = sphere_prior()
    save_body_prior(p, tmp_path / "bp.json")
    q = load_body_prior(tmp_path / "bp.json")
    assert np.array_equal(p.template_points, q.template_points) and np.array_equal(p.part_labels, q.part_labels)
    assert np.array_equal(p.point_indices, np.arange(256))
    with pytest.raises(ValueError):
        BodyPrior(np.zeros((10, 3)), np.zeros(10, int))  # fewer points than parts
    with pytest.raises(ValueError):
        BodyPrior(np.zeros((30, 3)), np.full(30, 24))
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(IngestError):
        load_body_prior(tmp_path / "bad.json")


def test_segment_parts_range():
    labels = segment_parts(fibonacci_sphere(500))
    assert labels.min() == 0 and labels.max() == 23 and len(np.unique(labels)) == 24


# ---- positions -----------------------------------------------------------

def test_generate_positions_sphere_chamfer(sphere):
    cam = sphere.views[0]
    depth = raycast_depth(sphere.surface, cam)
    n = 200
    out = generate_positions(cam, depth, sphere_prior(), n)
    assert out.shape == (n, 3)
    gt = sample_positions(sphere.surface, n, 0)
    h = float(kdist(gt, 1).mean())
    assert chamfer(out, gt) <= 2 * h


def test_generate_positions_passthrough_and_empty(sphere):
    gt = np.random.default_rng(0).normal(size=(20, 3))
    assert np.array_equal(generate_positions(sphere.views[0], None, sphere_prior(), 20, gt_positions=gt), gt)
    with pytest.raises(EmptyDepth):
        generate_positions(sphere.views[0], np.zeros((32, 32)), sphere_prior(), 20)


@pytest.mark.parametrize("n", [1, 50, 333])
def test_generate_positions_exact_count(sphere, n):
    depth = raycast_depth(sphere.surface, sphere.views[1])
    assert generate_positions(sphere.views[1], depth, sphere_prior(), n).shape == (n, 3)


# ---- visibility ----------------------------------------------------------

def cam_at_origin(res=32):
    return CameraView(20.0, 20.0, res / 2, res / 2, np.eye(4), res, res, 0.1, 10.0)


def test_visibility_two_points_on_one_ray():
    vis = partition_visibility(np.array([[0.0, 0, 1], [0.0, 0, 2]]), cam_at_origin(), tau=0.01)
    assert vis.tolist() == [True, False]


def test_visibility_behind_camera():
    pts = np.random.default_rng(0).normal(size=(30, 3))
    pts[:, 2] = -np.abs(pts[:, 2]) - 0.5
    assert not partition_visibility(pts, cam_at_origin()).any()


@pytest.mark.parametrize("view", range(4))
@pytest.mark.parametrize("n,res", [(2000, 64), (5000, 128)])
def test_visibility_matches_sphere_oracle(view, n, res):
    r = 0.4
    pts = fibonacci_sphere(n) * r
    cam = orbit_cameras(4, 1.6, res)[view]
    ours = partition_visibility(pts, cam)
    exact = sphere_visibility(pts, (0, 0, 0), r, cam.center)
    assert (ours == exact).mean() >= 0.95


@pytest.mark.parametrize("seed", range(10))
def test_visibility_some_point_visible(seed):
    pts = np.random.default_rng(seed).uniform(-0.3, 0.3, size=(40, 3)) + [0, 0, 2]
    assert partition_visibility(pts, cam_at_origin()).any()


# ---- back view -----------------------------------------------------------

def symmetric_sphere_scene():
    # colour depends on x and y only, so the texture is symmetric under z -> -z
    mesh = ellipsoid_mesh((0.4, 0.4, 0.4), (0, 0, 0), 24, 48,
                          lambda u: np.stack([0.5 + 0.3 * u[:, 0], 0.5 + 0.2 * u[:, 1], 0.4 + 0.3 * u[:, 0] * u[:, 1]], 1))
    cams = orbit_cameras(3, 1.6, 32)  # no captured view sits at the back pose
    images = torch.stack([render_surface(mesh, c).rgb for c in cams])
    from hugdiff.proxygt import SceneCapture
    # the vertex set is mirror-symmetric, so its centroid is the sphere centre
    prior = BodyPrior(mesh.vertices, segment_parts(mesh.vertices))
    return SceneCapture("sym", cams, images, mesh, prior)


def test_back_view_of_symmetric_sphere_is_mirror():
    scene = symmetric_sphere_scene()
    img, back = back_view_provider(scene.views[0], scene)
    front = scene.images[0]
    assert torch.allclose(img, torch.flip(front, dims=[1]), atol=1e-5)
    img2, _ = back_view_provider(scene.views[0], scene)
    assert torch.equal(img, img2)


def test_mirrored_camera_axis_antiparallel():
    for cam in orbit_cameras(5, 1.6, 32):
        back = mirrored_camera(cam, sphere_prior())
        assert np.abs(back.forward + cam.forward).max() < 1e-6


def test_back_view_uses_captured_view():
    scene = toy_scene(0, n_views=4, resolution=16)  # view 2 is opposite view 0
    img, back = back_view_provider(scene.views[0], scene)
    assert torch.equal(img, scene.images[2])


def test_back_view_missing_source():
    class Bare:
        views, images, surface, body_prior = [], None, None, None
    with pytest.raises(MissingBackView):
        GroundTruthBackView()(cam_at_origin(), Bare())


# ---- pixel-aligned features ----------------------------------------------

def test_pixel_features_constant_images():
    torch.manual_seed(0)
    enc = ImageEncoder(4).double()
    cam = orbit_cameras(4, 1.6, 32)[0]
    back = mirrored_camera(cam, sphere_prior())
    img = torch.full((32, 32, 3), 0.3, dtype=torch.float64)
    pts = np.random.default_rng(0).uniform(-0.05, 0.05, size=(20, 3))  # project near both image centres
    vis = np.arange(20) % 2 == 0
    beta = pixel_aligned_features(torch.as_tensor(pts), vis, img, img, cam, back, enc)
    assert beta.shape == (20, 2 * enc.out_dim + 1)
    assert torch.allclose(beta[:, :-1], beta[:1, :-1].expand(20, -1), atol=1e-12)
    assert torch.equal(beta[:, -1], torch.as_tensor(vis, dtype=torch.float64))


def test_pixel_features_outside_frames_are_zero():
    enc = ImageEncoder(4).double()
    cam = cam_at_origin()
    back = CameraView(20.0, 20.0, 16, 16, np.diag([-1.0, 1, -1, 1]), 32, 32, 0.1, 10.0)
    pts = torch.tensor([[50.0, 0, 1.0], [0.0, 80, 3.0]], dtype=torch.float64)
    img = torch.rand(32, 32, 3, dtype=torch.float64)
    beta = pixel_aligned_features(pts, np.array([True, False]), img, img, cam, back, enc)
    assert beta[:, :-1].abs().max() == 0
    assert beta[:, -1].tolist() == [1.0, 0.0]


def test_bilinear_at_pixel_centres_is_lookup():
    g = torch.Generator().manual_seed(0)
    maps = [torch.randn(1, 5, 12, 16, generator=g, dtype=torch.float64)]
    vs, us = np.meshgrid(np.arange(12), np.arange(16), indexing="ij")
    u = torch.as_tensor(us.ravel() + 0.5, dtype=torch.float64)
    v = torch.as_tensor(vs.ravel() + 0.5, dtype=torch.float64)
    out = sample_maps(maps, u, v, 16, 12, torch.ones(len(u), dtype=torch.bool))
    direct = maps[0][0][:, vs.ravel(), us.ravel()].T
    assert torch.allclose(out, direct, atol=1e-12)


def test_pixel_features_translation_equivariant():
    torch.manual_seed(1)
    enc = ImageEncoder(4).double()
    res, s = 48, 4
    scene = textured_sphere(n_views=4, resolution=res)
    cam = scene.views[0]
    back = mirrored_camera(cam, scene.body_prior)
    pts = torch.as_tensor(fibonacci_sphere(100) * 0.2)
    a = pixel_aligned_features(pts, np.ones(100, bool), scene.images[0].double(), scene.images[2].double(),
                               cam, back, enc)

    def shift(c):
        return CameraView(c.fx, c.fy, c.cx + s, c.cy + s, c.world_to_camera, res, res, c.near, c.far)

    rolled = [torch.roll(scene.images[k].double(), (s, s), (0, 1)) for k in (0, 2)]
    b = pixel_aligned_features(pts, np.ones(100, bool), rolled[0], rolled[1], shift(cam), shift(back), enc)
    assert torch.allclose(a, b, atol=1e-9)


# ---- body semantics ------------------------------------------------------

def test_nearest_template_coincident_point():
    p = sphere_prior()
    m = 37
    idx, dist, label = nearest_template(p.template_points[m:m + 1], p)
    assert idx[0] == m and dist[0] == 0 and label[0] == p.part_labels[m]


@pytest.mark.parametrize("seed", range(5))
def test_nearest_template_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    m, n = 24 + rng.integers(0, 476), rng.integers(1, 500)
    prior = BodyPrior(rng.normal(size=(m, 3)), rng.integers(0, 24, m))
    pts = rng.normal(size=(n, 3))
    idx, dist, label = nearest_template(pts, prior)
    bi, bd = brute_nearest(pts, prior.template_points)
    assert np.array_equal(idx, bi) and np.allclose(dist, bd, atol=1e-12)
    assert np.array_equal(label, prior.part_labels[bi])


def test_nearest_template_rigid_invariance():
    rng = np.random.default_rng(3)
    prior = BodyPrior(rng.normal(size=(200, 3)), rng.integers(0, 24, 200))
    pts = rng.normal(size=(300, 3))
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    q *= np.sign(np.linalg.det(q))
    t = rng.normal(size=3)
    moved = BodyPrior(prior.template_points @ q.T + t, prior.part_labels)
    a = nearest_template(pts, prior)
    b = nearest_template(pts @ q.T + t, moved)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[2], b[2]) and np.allclose(a[1], b[1], atol=1e-12)


def test_body_semantic_dims():
    emb = BodyEmbedder()
    feats = body_semantic_features(np.zeros((5, 3)), sphere_prior(), emb)
    assert feats.shape == (5, 40)


# ---- assembled condition ---------------------------------------------------

def test_condition_net_dims_and_determinism():
    scene = toy_scene(0, n_views=4, resolution=16)
    pos = sample_positions(scene.surface, 60, 0)
    ci = prepare_condition(pos, scene.images[0], scene.views[0], scene, scene.body_prior)
    torch.manual_seed(0)
    net = ConditionNet(channels=8)
    assert (net.beta_dim, net.gamma_dim, net.out_dim) == (55, 40, 95)
    a = net(ci)
    b = net(prepare_condition(pos, scene.images[0], scene.views[0], scene, scene.body_prior))
    assert torch.equal(a.features(), b.features()) and torch.equal(a.visibility, b.visibility)
    assert a.features().shape == (60, 95)
    perm = np.random.default_rng(0).permutation(60)
    c = net(ci.permuted(perm))
    assert torch.equal(c.features(), a.features()[torch.as_tensor(perm)])


def test_condition_net_ablations_zero_features():
    scene = toy_scene(0, n_views=4, resolution=16)
    pos = sample_positions(scene.surface, 30, 0)
    ci = prepare_condition(pos, scene.images[0], scene.views[0], scene, scene.body_prior)
    net = ConditionNet(channels=4, use_semantic=False)
    assert net(ci).body_semantic.abs().max() == 0
