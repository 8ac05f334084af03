from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
import torch

from mvocc.components.diffcore import Conv2d, Linear
from mvocc.components.errors import EmptyViewSet, PointBehindCamera
from mvocc.components.geometry import CameraRig, Extrinsics, Intrinsics, apply_rigid_motion, look_at
from mvocc.components.model import (ModelField, SampleBatch, aggregate, build_model, global_feature,
                                    occupancy_loss, point_feature)

from conftest import orbit_rigs, random_rotation


def _batch(n_samples=2, n_views=3, n_points=12, seed=0, labels=False):
    rng = np.random.default_rng(seed)
    intr = Intrinsics.centered(16, 10.0)
    rigs = [orbit_rigs(intr, n_views, seed=seed + b) for b in range(n_samples)]
    images = rng.uniform(0.0, 1.0, size=(n_samples, n_views, 16, 16, 3))
    points = rng.uniform(-0.5, 0.5, size=(n_samples, n_points, 3))
    y = rng.integers(0, 2, size=(n_samples, n_points)) if labels else None
    return SampleBatch(images, rigs, points, y)


def _permuted(batch, order):
    order = list(order)
    return SampleBatch(batch.images[:, order], [[rigs[i] for i in order] for rigs in batch.rigs], batch.points,
                       batch.labels)


def _randomize(model):
    for module in model.modules():
        if isinstance(module, (Linear, Conv2d)):
            module.reset_parameters()
    return model


# ── aggregation ─────────────────────────────────────────────────────────

def test_aggregate_single_view_has_zero_variance():
    g = torch.tensor([[0.3, -1.2, 4.0]])
    for mode in ('elementwise', 'l2'):
        g_mean, g_var = aggregate(g, mode=mode)
        assert torch.equal(g_mean, g[0])
        assert torch.all(g_var == 0)


def test_aggregate_two_views():
    g_mean, g_var = aggregate([torch.tensor([1.0]), torch.tensor([3.0])])
    assert g_mean.item() == pytest.approx(2.0)
    assert g_var.item() == pytest.approx(1.0)


def test_aggregate_l2_dispersion():
    g_mean, g_var = aggregate(torch.tensor([[0.0, 0.0], [6.0, 8.0]]), mode='l2')
    assert torch.allclose(g_mean, torch.tensor([3.0, 4.0]))
    assert g_var.shape == (1,)
    assert g_var.item() == pytest.approx(5.0)


def test_aggregate_skips_invalid_views():
    gs = torch.tensor([[[1.0], [5.0]], [[3.0], [100.0]]])
    valid = torch.tensor([[True, True], [True, False]])
    g_mean, g_var = aggregate(gs, valid)
    assert torch.allclose(g_mean[:, 0], torch.tensor([2.0, 5.0]))
    assert torch.allclose(g_var[:, 0], torch.tensor([1.0, 0.0]))


def test_aggregate_empty():
    with pytest.raises(EmptyViewSet):
        aggregate([])
    with pytest.raises(EmptyViewSet):
        aggregate(torch.ones(2, 1, 3), torch.zeros(2, 1, dtype=torch.bool))


def test_global_feature_averages_views_and_pixels():
    maps = torch.stack([torch.zeros(2, 4, 4), torch.full((2, 4, 4), 2.0)])
    assert torch.allclose(global_feature(maps), torch.ones(2))
    with pytest.raises(EmptyViewSet):
        global_feature([])


# ── point features ──────────────────────────────────────────────────────

@pytest.fixture
def pixel_rig():
    return CameraRig(Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4), Extrinsics.identity())


def test_point_feature_constant_map(pixel_rig):
    maps = torch.full((3, 4, 4), 0.7, dtype=torch.float64)
    c = point_feature(maps, np.array([[0.5, 1.5, 1.0], [1.0, 2.0, 4.0]]), pixel_rig)
    assert torch.allclose(c, torch.full((2, 3), 0.7, dtype=torch.float64))


def test_point_feature_at_texel(pixel_rig):
    maps = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
    assert point_feature(maps, np.array([2.0, 1.0, 1.0]), pixel_rig).item() == pytest.approx(6.0)


def test_point_feature_clamps_outside_image(pixel_rig):
    maps = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
    assert point_feature(maps, np.array([100.0, 100.0, 1.0]), pixel_rig).item() == pytest.approx(15.0)


def test_point_feature_behind_camera(pixel_rig):
    with pytest.raises(PointBehindCamera):
        point_feature(torch.zeros(1, 4, 4), np.array([0.0, 0.0, -1.0]), pixel_rig)


def test_point_feature_masks_points_behind(pixel_rig):
    maps = torch.arange(16, dtype=torch.float64).reshape(1, 4, 4)
    c, in_front = point_feature(maps, np.array([[2.0, 1.0, 1.0], [0.0, 0.0, -1.0]]), pixel_rig, mask_behind=True)
    assert in_front.tolist() == [True, False]
    assert c[:, 0].tolist() == pytest.approx([6.0, 0.0])


def test_point_feature_resamples_to_model_resolution(pixel_rig):
    maps = torch.arange(64, dtype=torch.float64).reshape(1, 8, 8)
    # pixel (1, 0) of the 4 px image lands at (2.5, 0.5) on the 8 px map, where value = 8 v + u
    assert point_feature(maps, np.array([1.0, 0.0, 1.0]), pixel_rig, image_size=8).item() == pytest.approx(6.5)


# ── network ─────────────────────────────────────────────────────────────

def test_forward_shapes(tiny_model_config):
    model = build_model(tiny_model_config)
    probs = model(_batch())
    assert probs.shape == (2, 12)
    assert torch.all((probs > 0) & (probs < 1))


@pytest.mark.parametrize('variant, width', [('P', 8 + 3), ('PC', 8 + 6), ('PCV', 8 + 6)])
def test_geometry_input_width(tiny_model_config, variant, width):
    model = build_model(replace(tiny_model_config, variant=variant))
    assert model.geo_lift.in_features == width
    assert model(_batch(1, 2, 5)).shape == (1, 5)


@pytest.mark.parametrize('overrides', [{'variance_mode': 'l2'}, {'norm_mode': 'sample'},
                                       {'feature_extent': 'global'}, {'coordinate_mode': 'object'},
                                       {'dtype': 'float32'}])
def test_model_options_run(tiny_model_config, overrides):
    model = build_model(replace(tiny_model_config, **overrides))
    probs = model(_batch(2, 2, 6))
    assert probs.shape == (2, 6)
    assert torch.all(torch.isfinite(probs))


def test_images_resampled_to_model_size(tiny_model_config):
    model = build_model(replace(tiny_model_config, image_size=8))
    assert model(_batch(1, 2, 4)).shape == (1, 4)


def test_view_permutation_invariance(tiny_model_config):
    model = _randomize(build_model(tiny_model_config)).eval()
    rng = np.random.default_rng(0)
    for seed in range(10):
        batch = _batch(n_samples=10, n_views=4, seed=seed)
        with torch.no_grad():
            before = model(batch)
            after = model(_permuted(batch, rng.permutation(4)))
        assert torch.max(torch.abs(before - after) / before.abs()) <= 1e-5


def test_single_view_pcv(tiny_model_config):
    model = build_model(tiny_model_config).eval()
    with torch.no_grad():
        probs = model(_batch(1, 1, 8))
    assert torch.all(torch.isfinite(probs))


def test_single_view_point_behind_camera(tiny_model_config):
    model = build_model(tiny_model_config)
    rig = CameraRig(Intrinsics.centered(16, 10.0), look_at([0.0, 0.0, -2.2], [0.0, 0.0, 0.0]))
    batch = SampleBatch(np.zeros((1, 1, 16, 16, 3)), [[rig]], np.array([[[0.0, 0.0, 0.0], [0.0, 0.0, -5.0]]]))
    with pytest.raises(PointBehindCamera):
        model(batch)


def _moved(batch, seed):
    rng = np.random.default_rng(seed)
    Q, d = random_rotation(rng), rng.uniform(-1.0, 1.0, size=3)
    points, rigs = [], []
    for sample_points, sample_rigs in zip(batch.points, batch.rigs):
        moved_points, moved_rigs = apply_rigid_motion(sample_points, sample_rigs, Q, d)
        points.append(moved_points)
        rigs.append(moved_rigs)
    return SampleBatch(batch.images, rigs, np.stack(points))


def test_view_centric_rigid_motion_invariance(tiny_model_config):
    model = _randomize(build_model(tiny_model_config)).eval()
    batch = _batch(n_views=3, seed=5)
    with torch.no_grad():
        before = model(batch)
        for seed in range(50):
            after = model(_moved(batch, seed))
            assert torch.max(torch.abs(before - after) / before.abs()) <= 1e-5


def test_object_centric_prediction_follows_world_frame(tiny_model_config):
    model = _randomize(build_model(replace(tiny_model_config, coordinate_mode='object'))).eval()
    batch = _batch(n_views=3, seed=5)
    changed = 0
    with torch.no_grad():
        before = model(batch)
        for seed in range(50):
            changed += bool(torch.max(torch.abs(before - model(_moved(batch, seed)))) > 1e-3)
    assert changed >= 45


def test_every_parameter_receives_gradient(tiny_model_config):
    model = _randomize(build_model(tiny_model_config)).train()
    batch = _batch(n_views=3, n_points=64, seed=7, labels=True)
    probs = model(batch)
    occupancy_loss(probs, torch.as_tensor(batch.labels, dtype=probs.dtype)).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None, name
        assert torch.any(p.grad != 0), name


def test_occupancy_loss_values():
    assert occupancy_loss(torch.full((2, 3), 0.5), torch.ones(2, 3)).item() == pytest.approx(np.log(2.0), rel=1e-6)
    assert occupancy_loss(torch.tensor([0.3]), torch.tensor([1])).item() == pytest.approx(1.2040, abs=1e-4)


def test_model_field_matches_decode(tiny_model_config):
    model = build_model(tiny_model_config).eval()
    batch = _batch(1, 2, 7)
    field = ModelField(model, batch.images[0], batch.rigs[0])
    values = field(batch.points[0])
    with torch.no_grad():
        expected = model(batch)[0].numpy()
    assert values.shape == (7,)
    assert np.allclose(values, expected)
