#!/usr/bin/env python
import math

import numpy as np
import pytest

import testutils
from testutils import rect, square

from roofshift.data_model import Dataset, DatasetFormatError, ImageRecord, Polygon
from roofshift.evaluation import (
    EvalConfig,
    MatchResult,
    MetricsReport,
    MixedImageError,
    PredictionInstance,
    UnknownImageError,
    average_precision,
    boundary_ap50,
    epe,
    evaluate_dataset,
    greedy_match,
    load_predictions,
    match_instances,
    precision_recall_f1,
    prf_from_counts,
    save_predictions,
    with_ground_truth_offsets,
)
from roofshift.synth import NoiseConfig, SceneConfig, generate_scene, perturb_predictions


def self_predictions(ds, score=1.0):
    return [
        PredictionInstance.from_roof(a.image_id, a.roof, a.offset, score, a.id)
        for a in ds.annotations
    ]


def zeroed_offsets(preds):
    return [PredictionInstance.from_roof(p.image_id, p.roof, (0, 0), p.score, p.id) for p in preds]


def scene(**kwargs):
    kwargs.setdefault("width", 400)
    kwargs.setdefault("height", 400)
    kwargs.setdefault("n_buildings", 12)
    return generate_scene(SceneConfig(**kwargs))


## Matching


def test_greedy_examples():
    m = greedy_match([1.0], [[0.6]], 0.5)
    assert [(p, g) for p, g, _ in m.pairs] == [(0, 0)]
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)

    m = greedy_match([1.0], [[0.4]], 0.5)
    assert (m.tp, m.fp, m.fn) == (0, 1, 1)

    # higher score wins even with the lower IoU
    m = greedy_match([0.9, 0.8], [[0.7], [0.9]], 0.5)
    assert m.pairs == ((0, 0, 0.7),)
    assert m.unmatched_predictions == (1,)


def test_greedy_edges():
    assert greedy_match([], np.zeros((0, 3))).fn == 3
    assert greedy_match([0.5, 0.4], np.zeros((2, 0))).fp == 2
    assert greedy_match([], []) == MatchResult()
    with pytest.raises(ValueError):
        greedy_match([1.0], [[1.0]], 0)


def test_greedy_score_ties_keep_input_order():
    m = greedy_match([1.0, 1.0], [[0.8], [0.9]], 0.5)
    assert m.pairs == ((0, 0, 0.8),)
    assert greedy_match([1.0], [[0.7, 0.7]]).pairs == ((0, 0, 0.7),)


def test_greedy_matches_reference():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n, m = rng.integers(0, 6, size=2)
        scores = rng.choice([0.2, 0.5, 0.9], size=n)  # plenty of ties
        iou = rng.uniform(0, 1, size=(n, m))
        got = greedy_match(scores, iou, 0.5)

        assert sorted((p, g) for p, g, _ in got.pairs) == testutils.reference_greedy(
            scores, iou, 0.5
        )
        assert all(v >= 0.5 for _, _, v in got.pairs)
        assert len({p for p, _, _ in got.pairs}) == got.tp
        assert len({g for _, g, _ in got.pairs}) == got.tp
        assert got.tp + got.fp == n and got.tp + got.fn == m
        assert got.tp <= testutils.max_matching(iou, 0.5)

        # permuting ground truths keeps the TP count
        perm = rng.permutation(m)
        assert greedy_match(scores, iou[:, perm], 0.5).tp == got.tp


def test_match_instances_polygons():
    gt = testutils.make_dataset([(square(10, 10, 10), (0, 0))], 40, 40)
    near = PredictionInstance(1, Polygon(rect(13, 10, 10, 10)))  # IoU 70 / 130
    far = PredictionInstance(1, Polygon(rect(15, 10, 10, 10)))  # IoU 50 / 150

    m = match_instances([near], gt.annotations, threshold=0.5, shape=(40, 40))
    assert m.tp == 1
    assert m.pairs[0][2] == pytest.approx(70 / 130)
    assert match_instances([far], gt.annotations, shape=(40, 40)).tp == 0

    both = match_instances([far, near], gt.annotations, shape=(40, 40))
    assert [p for p, _, _ in both.pairs] == [1]
    assert both.unmatched_predictions == (0,)


def test_match_instances_roof_track_skips_roofless():
    gt = testutils.make_dataset([(square(10, 10, 10), (4, 0))], 40, 40)
    ann = gt.annotations[0]
    roofless = PredictionInstance(1, ann.footprint)
    full = PredictionInstance.from_roof(1, ann.roof, ann.offset, id="full")

    m = match_instances([roofless, full], gt.annotations, track="roof", shape=(40, 40))
    assert [p for p, _, _ in m.pairs] == [1]
    assert m.unmatched_predictions == ()
    assert match_instances([roofless], gt.annotations, track="footprint").tp == 1


def test_match_instances_errors():
    gt = testutils.make_dataset([(square(0, 0, 5), (0, 0))], 10, 10, image_id=2)
    pred = PredictionInstance(1, Polygon(square(0, 0, 5)))
    with pytest.raises(MixedImageError):
        match_instances([pred], gt.annotations)
    with pytest.raises(ValueError):
        match_instances([], gt.annotations, iou_kind="polygon")
    with pytest.raises(ValueError):
        match_instances([], gt.annotations, track="walls")


def test_boundary_kind_stricter_than_mask():
    gt = testutils.make_dataset([(square(20, 20, 40), (0, 0))], 100, 100)
    pred = PredictionInstance(1, Polygon(rect(24, 20, 40, 40)))
    mask = match_instances([pred], gt.annotations, "mask", shape=(100, 100))
    bnd = match_instances([pred], gt.annotations, "boundary", shape=(100, 100), boundary_d=1)
    assert mask.pairs[0][2] == pytest.approx(36 / 44)
    assert bnd.tp == 0


## Scores


def test_prf_examples():
    assert prf_from_counts(1, 0, 0) == (1, 1, 1)
    assert prf_from_counts(1, 1, 1) == (0.5, 0.5, 0.5)
    assert prf_from_counts(0, 3, 2) == (0, 0, 0)
    assert prf_from_counts(0, 0, 0) == (0, 0, 0)
    m = MatchResult(pairs=((0, 0, 0.9),), unmatched_predictions=(1,), unmatched_ground_truths=(1,))
    assert precision_recall_f1(m) == (0.5, 0.5, 0.5)


def test_prf_monotone():
    rng = np.random.default_rng(1)
    for _ in range(100):
        tp, fp, fn = (int(v) for v in rng.integers(0, 20, size=3))
        _, _, f1 = prf_from_counts(tp, fp, fn)
        p, _, _ = prf_from_counts(tp, fp, fn)
        # one more TP found: an FN turns into a TP
        if fn:
            assert prf_from_counts(tp + 1, fp, fn - 1)[2] >= f1
        assert prf_from_counts(tp, fp + 1, fn)[0] <= p


def test_average_precision_examples():
    assert average_precision([0.3, 0.9], [True, True], 2) == 1.0
    assert average_precision([], [], 3) == 0.0
    assert average_precision([], [], 0) == 1.0
    assert average_precision([0.5], [False], 0) == 0.0

    # three detections, two ground truths: TP, FP, TP
    want = (51 * 1.0 + 50 * (2 / 3)) / 101
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 2) == pytest.approx(want)
    assert testutils.brute_ap([0.9, 0.8, 0.7], [True, False, True], 2) == pytest.approx(want)


def test_average_precision_matches_enumeration():
    rng = np.random.default_rng(2)
    for _ in range(50):
        n = int(rng.integers(1, 15))
        scores = rng.choice([0.1, 0.3, 0.6, 0.8, 1.0], size=n)
        flags = rng.random(n) < 0.6
        n_gt = int(flags.sum() + rng.integers(0, 4))
        got = average_precision(scores, flags, n_gt)
        assert 0 <= got <= 1
        assert got == pytest.approx(testutils.brute_ap(scores, flags, n_gt))


def test_boundary_ap50():
    gt = scene(seed=4)
    preds = self_predictions(gt)
    rng = np.random.default_rng(4)
    scored = [
        PredictionInstance.from_roof(p.image_id, p.roof, p.offset, float(s), p.id)
        for p, s in zip(preds, rng.uniform(0.05, 1, size=len(preds)))
    ]
    assert boundary_ap50(scored, gt) == 1.0
    assert boundary_ap50(scored, gt.annotations) == 1.0
    assert boundary_ap50([], gt) == 0.0
    assert boundary_ap50([], []) == 1.0
    with pytest.raises(ValueError):
        boundary_ap50(preds, gt, d=-1)


def test_boundary_ap50_toy_case():
    # two ground truths, three predictions ranked TP, FP, TP
    gt = testutils.make_dataset([(square(10, 10, 20), (0, 0)), (square(60, 60, 20), (0, 0))])
    preds = [
        PredictionInstance(1, Polygon(square(10, 10, 20)), score=0.9, id="a"),
        PredictionInstance(1, Polygon(square(40, 5, 10)), score=0.8, id="b"),
        PredictionInstance(1, Polygon(square(60, 60, 20)), score=0.7, id="c"),
    ]
    want = testutils.brute_ap([0.9, 0.8, 0.7], [True, False, True], 2)
    assert boundary_ap50(preds, gt) == pytest.approx(want)


def test_epe_examples():
    assert epe([((3, 4), (0, 0))]) == 5.0
    assert epe([((1.5, -2), (1.5, -2))]) == 0.0
    assert epe([((0, 0), (0, 0)), ((3, 4), (0, 0))]) == 2.5
    assert epe([]) is None


## Dataset level


def test_self_match():
    gt = scene(seed=1, footprint_kind="l_shape")
    report = evaluate_dataset(self_predictions(gt), gt)
    for track in ("roof", "footprint"):
        t = report.track(track)
        assert (t.f1, t.precision, t.recall, t.boundary_ap50) == (100, 100, 100, 100)
        assert (t.tp, t.fp, t.fn) == (len(gt), 0, 0)
    assert report.mean_epe == 0.0
    assert report.epe_count == len(gt)


def test_empty_predictions():
    gt = scene(seed=2)
    report = evaluate_dataset([], gt)
    for track in ("roof", "footprint"):
        t = report.track(track)
        assert (t.f1, t.precision, t.recall, t.boundary_ap50) == (0, 0, 0, 0)
        assert (t.tp, t.fp, t.fn) == (0, 0, len(gt))
    assert report.mean_epe is None
    assert report.epe_count == 0


def test_footprint_without_offsets_is_worse():
    gt = scene(
        seed=3,
        height_range=(10, 10),
        gsd=1.0,
        nadir_angle=45,
        azimuth=math.pi / 4,
        size_range=(30, 30),
    )
    assert all(a.offset.norm == pytest.approx(10) for a in gt.annotations)

    report = evaluate_dataset(zeroed_offsets(self_predictions(gt)), gt)
    assert report.roof.f1 == 100
    assert report.footprint.f1 < report.roof.f1


def test_roof_track_ignores_offsets():
    gt = scene(seed=5)
    noise = NoiseConfig(vertex_jitter_sigma=1.5, drop_rate=0.2, spurious_rate=3, seed=5)
    preds = perturb_predictions(gt, noise)
    rng = np.random.default_rng(5)
    moved = [
        PredictionInstance.from_roof(p.image_id, p.roof, rng.normal(size=2) * 20, p.score, p.id)
        for p in preds
    ]
    a, b = evaluate_dataset(preds, gt), evaluate_dataset(moved, gt)
    assert a.roof == b.roof


def test_ground_truth_offsets_upper_bound():
    """Roofs carrying their matched ground-truth offsets score the same on both tracks"""
    gt = scene(seed=6, n_images=2)
    noise = NoiseConfig(vertex_jitter_sigma=1.0, offset_noise_sigma=4.0, drop_rate=0.25, seed=6)
    fixed = with_ground_truth_offsets(perturb_predictions(gt, noise), gt)
    report = evaluate_dataset(fixed, gt)
    roof, foot = report.roof, report.footprint
    assert (foot.tp, foot.fp, foot.fn) == (roof.tp, roof.fp, roof.fn)
    assert report.mean_epe == 0.0


def test_ground_truth_offsets_unmatched_keep_own():
    gt = testutils.make_dataset([(square(10, 10, 10), (3, 0))], 60, 60)
    stray = PredictionInstance.from_roof(1, Polygon(square(40, 40, 10)), (1, 2), id="s")
    bare = PredictionInstance(1, Polygon(square(40, 0, 5)), id="b")
    roof_only = PredictionInstance(1, Polygon(square(0, 40, 5)), roof=Polygon(square(0, 40, 5)), id="r")
    out = {p.id: p for p in with_ground_truth_offsets([stray, bare, roof_only], gt)}
    assert out["s"].offset == (1, 2)
    assert out["b"] is bare
    assert out["r"].offset == (0, 0)


def test_order_independent():
    gt = scene(seed=7, n_images=3)
    noise = NoiseConfig(
        vertex_jitter_sigma=2, offset_noise_sigma=2, spurious_rate=2, score_model="uniform", seed=7
    )
    preds = perturb_predictions(gt, noise)
    rng = np.random.default_rng(7)
    shuffled = [preds[i] for i in rng.permutation(len(preds))]
    a = evaluate_dataset(preds, gt)
    assert evaluate_dataset(shuffled, gt) == a
    assert evaluate_dataset(preds, gt, EvalConfig(jobs=3)) == a


def test_unknown_image():
    gt = testutils.make_dataset([(square(0, 0, 5), (0, 0))])
    pred = PredictionInstance("nope", Polygon(square(0, 0, 5)), id=1)
    with pytest.raises(UnknownImageError):
        evaluate_dataset([pred], gt)


def test_image_without_annotations():
    ds = Dataset([ImageRecord(1, "", 50, 50)], [])
    pred = PredictionInstance(1, Polygon(square(0, 0, 5)), id=1)
    report = evaluate_dataset([pred], ds)
    assert (report.footprint.tp, report.footprint.fp, report.footprint.fn) == (0, 1, 0)
    assert report.footprint.f1 == 0


def test_eval_config():
    with pytest.raises(ValueError):
        EvalConfig(iou_threshold=0)
    with pytest.raises(ValueError):
        EvalConfig(boundary_d=-2)
    with pytest.raises(ValueError):
        EvalConfig(raster_scale=0)
    assert "jobs" not in EvalConfig(jobs=4).to_json()


def test_raster_scale_keeps_self_match():
    gt = testutils.make_dataset([(square(3.3, 4.1, 9.7), (2.5, -1.25))], 30, 30)
    report = evaluate_dataset(self_predictions(gt), gt, EvalConfig(raster_scale=4))
    assert report.footprint.f1 == 100
    assert report.config["raster_scale"] == 4


def test_report_json():
    report = MetricsReport()
    obj = report.to_json()
    assert obj["roof"]["f1"] == 0.0
    assert obj["mean_epe"] is None
    assert set(obj) == {"roof", "footprint", "mean_epe", "median_epe", "max_epe", "epe_count", "config"}


## Prediction files


def test_predictions_roundtrip(tmp_path):
    gt = scene(seed=8, n_buildings=5)
    preds = perturb_predictions(gt, NoiseConfig(vertex_jitter_sigma=1, offset_noise_sigma=1, seed=8))
    path = str(tmp_path / "pred.json")
    save_predictions(preds, path)
    assert load_predictions(path) == preds


def test_prediction_parse(tmp_path):
    path = tmp_path / "p.json"
    path.write_text(
        '[{"image_id": 1, "score": 0.5, "roof": [[0,0],[4,0],[4,4],[0,4]], "offset": [1, 1]}]'
    )
    (pred,) = load_predictions(str(path))
    assert list(pred.footprint.vertices) == [(1, 1), (5, 1), (5, 5), (1, 5)]
    assert pred.id == 0

    path.write_text('{"annotations": [{"image_id": 1, "roof": [[0,0],[4,0],[4,4]], "offset": [1, 1]}]}')
    with pytest.raises(DatasetFormatError):
        load_predictions(str(path))  # score is mandatory

    path.write_text('[{"image_id": 1, "score": 1, "roof": [[0,0],[4,0],[4,4]]}]')
    with pytest.raises(DatasetFormatError):
        load_predictions(str(path))  # no footprint to score

    foot = '"footprint": [[0,0],[4,0],[4,4]]'
    for text in (
        '{"annotations": null}',
        "[5]",
        '[{"image_id": [1], "score": 1, %s}]' % foot,
        '[{"id": {"a": 1}, "image_id": 1, "score": 1, %s}]' % foot,
    ):
        path.write_text(text)
        with pytest.raises(DatasetFormatError):
            load_predictions(str(path))

    with pytest.raises(ValueError):
        PredictionInstance(1, Polygon(square(0, 0, 2)), score=float("nan"))
