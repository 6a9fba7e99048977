#!/usr/bin/env python
import math
from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

import testutils

from roofshift.data_model import save_dataset, validate
from roofshift.evaluation import epe
from roofshift.foa import FeatureShapeError, rotate_feature_map, rotate_offset
from roofshift.geometry import rasterize
from roofshift.synth import (
    NoiseConfig,
    PlacementError,
    SceneConfig,
    generate_feature_for_offset,
    generate_scene,
    offset_for_height,
    perturb_predictions,
)


def test_offset_formula():
    o = offset_for_height(30, 0.6, 30, 0)
    assert o.ox == pytest.approx(28.867513459481287, rel=1e-12)
    assert o.oy == 0
    assert offset_for_height(30, 0.6, 0, 1.2) == (0, 0)

    down = offset_for_height(10, 1.0, 45, math.pi / 2)
    assert down.ox == pytest.approx(0, abs=1e-12)
    assert down.oy == pytest.approx(10)

    heights = [offset_for_height(h, 0.5, 20, 0.3).norm for h in (5, 10, 20, 40)]
    angles = [offset_for_height(20, 0.5, a, 0.3).norm for a in (5, 15, 30, 60)]
    assert heights == sorted(heights) and len(set(heights)) == 4
    assert angles == sorted(angles) and len(set(angles)) == 4

    with pytest.raises(ValueError):
        offset_for_height(10, 1.0, 75, 0)


def test_scene_config_checks():
    with pytest.raises(ValueError):
        SceneConfig(nadir_angle=61)
    with pytest.raises(ValueError):
        SceneConfig(gsd=0)
    with pytest.raises(ValueError):
        SceneConfig(n_buildings=-1)
    with pytest.raises(ValueError):
        SceneConfig(footprint_kind="circle")
    with pytest.raises(ValueError):
        SceneConfig(height_range=(10, 5))


def test_noise_config_checks():
    with pytest.raises(ValueError):
        NoiseConfig(drop_rate=1.5)
    with pytest.raises(ValueError):
        NoiseConfig(offset_noise_sigma=-1)
    with pytest.raises(ValueError):
        NoiseConfig(spurious_rate=-0.1)
    with pytest.raises(ValueError):
        NoiseConfig(score_model="random")


def test_nadir_zero():
    ds = generate_scene(SceneConfig(nadir_angle=0, seed=3))
    assert len(ds) == 20
    assert all(a.offset == (0, 0) for a in ds.annotations)
    assert all(a.footprint == a.roof for a in ds.annotations)


@pytest.mark.parametrize("kind", ["rectangle", "l_shape"])
def test_scene_valid_and_placed(kind):
    config = SceneConfig(footprint_kind=kind, n_images=3, seed=11)
    ds = generate_scene(config)
    assert [im.id for im in ds.images] == [1, 2, 3]
    assert [a.id for a in ds.annotations] == list(range(1, 61))
    assert validate(ds, tol=1e-9) == []

    for image_id, anns in ds.by_image().items():
        assert len(anns) == 20
        union = np.zeros((config.height, config.width), dtype=int)
        for a in anns:
            x0, y0, x1, y1 = a.building_bbox.corners
            assert 0 <= x0 and 0 <= y0 and x1 <= config.width and y1 <= config.height
            union += rasterize(a.roof, config.width, config.height).bits
        assert union.max() == 1  # roofs never overlap


def test_scene_shared_azimuth():
    ds = generate_scene(SceneConfig(n_images=2, seed=2))
    for anns in ds.by_image().values():
        directions = [math.atan2(a.offset.oy, a.offset.ox) for a in anns]
        assert directions == pytest.approx([directions[0]] * len(anns), abs=1e-9)

    fixed = generate_scene(SceneConfig(azimuth=0.25, seed=2))
    for a in fixed.annotations:
        assert math.atan2(a.offset.oy, a.offset.ox) == pytest.approx(0.25)


def test_scene_deterministic(tmp_path):
    paths = []
    for name, seed in (("a", 5), ("b", 5), ("c", 6)):
        path = str(tmp_path / f"{name}.json")
        save_dataset(generate_scene(SceneConfig(seed=seed, footprint_kind="l_shape")), path)
        paths.append(path)
    data = [open(p, "rb").read() for p in paths]
    assert data[0] == data[1]
    assert data[0] != data[2]


def test_placement_error():
    with pytest.raises(PlacementError) as info:
        generate_scene(SceneConfig(width=60, height=60, n_buildings=30))
    assert "of 30 buildings" in str(info.value)


def test_empty_scene():
    ds = generate_scene(SceneConfig(n_buildings=0, n_images=2))
    assert len(ds) == 0 and len(ds.images) == 2
    assert perturb_predictions(ds, NoiseConfig(spurious_rate=0)) == []


def test_zero_noise_is_identity():
    gt = generate_scene(SceneConfig(footprint_kind="l_shape", seed=1))
    preds = perturb_predictions(gt, NoiseConfig())
    assert len(preds) == len(gt)
    for p, a in zip(preds, gt.annotations):
        assert (p.id, p.image_id) == (a.id, a.image_id)
        assert p.roof == a.roof
        assert p.footprint == a.footprint
        assert p.offset == a.offset
        assert p.bbox == a.building_bbox
        assert p.score == 1.0


def test_drop_all():
    gt = generate_scene(SceneConfig(seed=1))
    assert perturb_predictions(gt, NoiseConfig(drop_rate=1.0)) == []


def test_perturb_deterministic():
    gt = generate_scene(SceneConfig(n_images=2, seed=4))
    noise = NoiseConfig(
        vertex_jitter_sigma=1.0, offset_noise_sigma=2.0, drop_rate=0.3, spurious_rate=2, seed=9
    )
    assert perturb_predictions(gt, noise) == perturb_predictions(gt, noise)
    other = replace(noise, seed=10)
    assert perturb_predictions(gt, noise) != perturb_predictions(gt, other)


def test_knobs_independent():
    """Raising the drop rate leaves the jitter of the kept predictions alone"""
    gt = generate_scene(SceneConfig(seed=8))
    base = NoiseConfig(vertex_jitter_sigma=1.5, offset_noise_sigma=2.0, seed=8)
    dropped = NoiseConfig(vertex_jitter_sigma=1.5, offset_noise_sigma=2.0, drop_rate=0.5, seed=8)
    full = {p.id: p for p in perturb_predictions(gt, base)}
    some = perturb_predictions(gt, dropped)
    assert 0 < len(some) < len(full)
    for p in some:
        assert p.roof == full[p.id].roof
        assert p.offset == full[p.id].offset


def test_spurious_predictions():
    gt = generate_scene(SceneConfig(n_images=4, seed=6))
    preds = perturb_predictions(gt, NoiseConfig(spurious_rate=5, seed=6))
    spurious = [p for p in preds if isinstance(p.id, str)]
    assert spurious
    assert all(p.id.startswith(f"spurious-{p.image_id}-") for p in spurious)
    assert all(0.05 <= p.score <= 1 for p in preds)
    offsets = {a.offset for a in gt.annotations}
    assert all(p.offset in offsets for p in spurious)


def test_iou_linked_scores_drop_with_jitter():
    gt = generate_scene(SceneConfig(seed=7))
    small = perturb_predictions(gt, NoiseConfig(vertex_jitter_sigma=0.5, seed=7))
    large = perturb_predictions(gt, NoiseConfig(vertex_jitter_sigma=4.0, seed=7))
    assert np.mean([p.score for p in large]) < np.mean([p.score for p in small]) <= 1


def test_offset_noise_epe():
    """Gaussian offset noise sigma per component gives mean EPE sigma * sqrt(pi / 2)"""
    sigma = 2.0
    gt = generate_scene(SceneConfig(n_buildings=10, n_images=1000, seed=12))
    assert len(gt) >= 10 ** 4
    preds = perturb_predictions(
        gt, NoiseConfig(offset_noise_sigma=sigma, score_model="uniform", seed=12)
    )
    offsets = {a.id: a.offset for a in gt.annotations}
    got = epe([(p.offset, offsets[p.id]) for p in preds])
    assert got == pytest.approx(sigma * math.sqrt(math.pi / 2), rel=0.03)


def test_azimuth_uniform():
    config = SceneConfig(
        width=1024,
        height=1024,
        n_buildings=10,
        n_images=1000,
        nadir_angle=10,
        azimuth_per_building=True,
        seed=13,
    )
    ds = generate_scene(config)
    theta = np.array([math.atan2(a.offset.oy, a.offset.ox) for a in ds.annotations])
    counts, _ = np.histogram(np.mod(theta, 2 * math.pi), bins=20, range=(0, 2 * math.pi))
    assert counts.sum() == 10 ** 4
    assert stats.chisquare(counts).pvalue > 0.01


def test_feature_deterministic_and_zero():
    a = generate_feature_for_offset((3.5, -2), 2, 9, 9)
    b = generate_feature_for_offset((3.5, -2), 2, 9, 9)
    assert np.array_equal(a.values, b.values)
    assert a.values.shape == (2, 9, 9)
    assert not np.any(generate_feature_for_offset((0, 0), 3, 9, 9).values)
    with pytest.raises(FeatureShapeError):
        generate_feature_for_offset((1, 1), 2, 9, 7)


def test_feature_injective_on_samples():
    rng = np.random.default_rng(14)
    maps = [
        generate_feature_for_offset(tuple(o), 2, 9, 9).values for o in rng.uniform(-16, 16, (20, 2))
    ]
    for i in range(len(maps)):
        for j in range(i):
            assert not np.allclose(maps[i], maps[j])


def test_feature_equivariance():
    rng = np.random.default_rng(15)
    for _ in range(50):
        rho = rng.uniform(2, 16)
        phi = rng.uniform(0, 2 * math.pi)
        o = (rho * math.cos(phi), rho * math.sin(phi))
        theta = rng.uniform(0, 2 * math.pi)
        lhs = generate_feature_for_offset(rotate_offset(o, theta), 2, 15, 15).values
        rhs = rotate_feature_map(generate_feature_for_offset(o, 2, 15, 15), theta).values
        assert np.max(np.abs(lhs - rhs)) < 0.05


def test_feature_equivariance_exact_at_quarter_turns():
    o = (5.0, -7.0)
    f = generate_feature_for_offset(o, 2, 9, 9)
    for k in range(4):
        theta = k * math.pi / 2
        lhs = generate_feature_for_offset(rotate_offset(o, theta), 2, 9, 9).values
        assert np.allclose(lhs, rotate_feature_map(f, theta).values, atol=1e-12, rtol=0)
