"""
Evaluation protocol: score-ordered greedy instance matching, precision /
recall / F1 at Mask IoU 0.5, Boundary AP50, and object-wise end-point error
of offsets on true-positive footprints. Roof and footprint tracks are
scored independently.

Polygons are rasterized at ground-truth image resolution (times
`raster_scale`) before any IoU is taken.
"""
import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import debug
from . import utils
from .data_model import (
    BBox,
    Dataset,
    DatasetFormatError,
    OffsetVector,
    Polygon,
    derive_footprint,
    group_by_image,
    parse_bbox,
    parse_id,
    parse_offset,
    parse_polygon,
    read_json,
    require,
    require_list,
    require_record,
)
from .geometry import default_boundary_d, patch_band, patch_iou, rasterize_patch

TRACKS = ("roof", "footprint")
IOU_KINDS = ("mask", "boundary")
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class MixedImageError(ValueError):
    pass


class UnknownImageError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionInstance:
    image_id: object
    footprint: Polygon
    score: float = 1.0
    roof: Optional[Polygon] = None
    offset: Optional[OffsetVector] = None
    id: object = None
    bbox: Optional[BBox] = None  # box the offset was decoded against, if any

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"Prediction {self.id!r}: score must be finite")

    @classmethod
    def from_roof(cls, image_id, roof, offset, score=1.0, id=None):
        offset = OffsetVector(float(offset[0]), float(offset[1]))
        return cls(
            image_id=image_id,
            footprint=derive_footprint(roof, offset),
            score=float(score),
            roof=roof,
            offset=offset,
            id=id,
        )

    def polygon(self, track):
        return self.roof if track == "roof" else self.footprint

    def to_json(self):
        obj = {"id": self.id, "image_id": self.image_id, "score": self.score}
        if self.roof is not None:
            obj["roof"] = self.roof.to_json()
        if self.offset is not None:
            obj["offset"] = [self.offset.ox, self.offset.oy]
        obj["footprint"] = self.footprint.to_json()
        if self.bbox is not None:
            obj["building_bbox"] = self.bbox.to_json()
        return obj


@dataclass(frozen=True)
class MatchResult:
    """Indices refer to the prediction and ground-truth lists that were matched"""

    pairs: Tuple[Tuple[int, int, float], ...] = ()
    unmatched_predictions: Tuple[int, ...] = ()
    unmatched_ground_truths: Tuple[int, ...] = ()

    @property
    def tp(self):
        return len(self.pairs)

    @property
    def fp(self):
        return len(self.unmatched_predictions)

    @property
    def fn(self):
        return len(self.unmatched_ground_truths)

    def tp_flags(self, n_preds):
        flags = np.zeros(n_preds, dtype=bool)
        for p, _, _ in self.pairs:
            flags[p] = True
        return flags


@dataclass(frozen=True)
class TrackMetrics:
    precision: float = 0.0  # percent
    recall: float = 0.0
    f1: float = 0.0
    boundary_ap50: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def to_json(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "boundary_ap50": self.boundary_ap50,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
        }


@dataclass(frozen=True)
class MetricsReport:
    roof: TrackMetrics = field(default_factory=TrackMetrics)
    footprint: TrackMetrics = field(default_factory=TrackMetrics)
    mean_epe: Optional[float] = None  # pixels, None when no footprint TP has an offset
    median_epe: Optional[float] = None
    max_epe: Optional[float] = None
    epe_count: int = 0
    config: dict = field(default_factory=dict)

    def track(self, name):
        return getattr(self, name)

    def to_json(self):
        return {
            "roof": self.roof.to_json(),
            "footprint": self.footprint.to_json(),
            "mean_epe": self.mean_epe,
            "median_epe": self.median_epe,
            "max_epe": self.max_epe,
            "epe_count": self.epe_count,
            "config": dict(self.config),
        }


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.5
    boundary_threshold: float = 0.5
    boundary_d: Optional[float] = None  # pixels; None -> 0.02 x image diagonal
    raster_scale: float = 1.0
    jobs: int = 1

    def __post_init__(self):
        for name in ("iou_threshold", "boundary_threshold"):
            val = getattr(self, name)
            if not 0 < val <= 1:
                raise ValueError(f"{name} must be in (0, 1]. Got {val}")
        if self.boundary_d is not None and self.boundary_d < 0:
            raise ValueError(f"boundary_d must be >= 0. Got {self.boundary_d}")
        if not self.raster_scale > 0:
            raise ValueError(f"raster_scale must be > 0. Got {self.raster_scale}")

    @classmethod
    def from_config(cls, config, **overrides):
        kwargs = {
            "iou_threshold": config.iou_threshold,
            "boundary_threshold": config.boundary_threshold,
            "boundary_d": config.boundary_d,
            "raster_scale": config.raster_scale,
            "jobs": config.jobs,
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)

    def to_json(self):
        return {
            "iou_threshold": self.iou_threshold,
            "boundary_threshold": self.boundary_threshold,
            "boundary_d": self.boundary_d,
            "raster_scale": self.raster_scale,
        }


## Matching


def greedy_match(scores, iou, threshold=0.5):
    """
    Predictions in descending score (ties: input order) each take the
    still-unmatched ground truth with the highest IoU >= threshold (ties:
    lowest ground-truth index).

    iou is an (n_pred, n_gt) matrix.
    """
    if not 0 < threshold <= 1:
        raise ValueError(f"threshold must be in (0, 1]. Got {threshold}")
    scores = np.asarray(scores, dtype=float)
    iou = np.asarray(iou, dtype=float)
    if iou.ndim != 2:
        iou = np.zeros((len(scores), 0))
    n_gt = iou.shape[1]

    taken = np.zeros(n_gt, dtype=bool)
    pairs, unmatched = [], []
    for p in np.argsort(-scores, kind="stable"):
        row = np.where(taken | (iou[p] < threshold), -1.0, iou[p])
        g = int(np.argmax(row)) if n_gt else -1
        if g < 0 or row[g] < 0:
            unmatched.append(int(p))
            continue
        taken[g] = True
        pairs.append((int(p), g, float(iou[p, g])))

    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(sorted(unmatched)),
        unmatched_ground_truths=tuple(int(g) for g in np.flatnonzero(~taken)),
    )


def _extent(polygons):
    """Canvas size covering every polygon when no image record is given"""
    pts = [p.array for p in polygons if p is not None]
    if not pts:
        return 1, 1
    xy = np.concatenate(pts)
    return (
        max(1, int(math.ceil(xy[:, 0].max())) + 1),
        max(1, int(math.ceil(xy[:, 1].max())) + 1),
    )


def _scaled(width, height, scale):
    return max(1, int(math.ceil(width * scale))), max(1, int(math.ceil(height * scale)))


def rasterize_all(polygons, width, height, scale=1.0):
    return [rasterize_patch(p, width, height, scale) for p in polygons]


def iou_matrix(pred_patches, gt_patches, kind="mask", d=None):
    """
    Pairwise IoU of two lists of MaskPatch on the same grid. Only pairs
    whose windows overlap are rasterized against each other.
    """
    if kind not in IOU_KINDS:
        raise ValueError(f"iou kind must be in {IOU_KINDS}. Got {kind!r}")
    if kind == "boundary":
        pred_patches = [patch_band(p, d) for p in pred_patches]
        gt_patches = [patch_band(g, d) for g in gt_patches]

    n, m = len(pred_patches), len(gt_patches)
    out = np.zeros((n, m))
    if not n or not m:
        return out

    def windows(patches):
        arr = np.array(
            [(p.x0, p.y0, p.x0 + p.bits.shape[1], p.y0 + p.bits.shape[0], p.count) for p in patches]
        )
        return arr.T

    px0, py0, px1, py1, pc = windows(pred_patches)
    gx0, gy0, gx1, gy1, gc = windows(gt_patches)
    overlap = (
        (px0[:, None] < gx1[None])
        & (gx0[None] < px1[:, None])
        & (py0[:, None] < gy1[None])
        & (gy0[None] < py1[:, None])
    )
    out[(pc[:, None] == 0) & (gc[None] == 0)] = 1.0
    for i, j in np.argwhere(overlap):
        out[i, j] = patch_iou(pred_patches[i], gt_patches[j])
    return out


def _gt_polygon(ann, track):
    return ann.roof if track == "roof" else ann.footprint


def _single_image(preds, gts):
    ids = {p.image_id for p in preds} | {g.image_id for g in gts}
    if len(ids) > 1:
        raise MixedImageError(f"Instances come from more than one image: {sorted(map(str, ids))}")


def match_instances(
    preds,
    gts,
    iou_kind="mask",
    threshold=0.5,
    track="footprint",
    shape=None,
    boundary_d=None,
    scale=1.0,
):
    """
    Match the predictions and ground truths of ONE image.

    Inputs:
    -------
    preds, gts
        PredictionInstance and BuildingAnnotation lists
    iou_kind
        'mask' or 'boundary'
    track
        'roof' or 'footprint'. Predictions without a roof are skipped on the
        roof track (their index still refers to `preds`)
    shape
        (width, height) of the image. Inferred from the polygons if None
    boundary_d
        band radius for boundary IoU. Default 0.02 x image diagonal
    """
    if track not in TRACKS:
        raise ValueError(f"track must be in {TRACKS}. Got {track!r}")
    _single_image(preds, gts)

    keep = [ii for ii, p in enumerate(preds) if p.polygon(track) is not None]
    pred_polys = [preds[ii].polygon(track) for ii in keep]
    gt_polys = [_gt_polygon(g, track) for g in gts]

    width, height = shape or _extent(pred_polys + gt_polys)
    if boundary_d is None:
        boundary_d = default_boundary_d(width, height)
    sw, sh = _scaled(width, height, scale)

    iou = iou_matrix(
        rasterize_all(pred_polys, sw, sh, scale),
        rasterize_all(gt_polys, sw, sh, scale),
        iou_kind,
        boundary_d * scale,
    )
    sub = greedy_match([preds[ii].score for ii in keep], iou, threshold)
    return MatchResult(
        pairs=tuple((keep[p], g, v) for p, g, v in sub.pairs),
        unmatched_predictions=tuple(keep[p] for p in sub.unmatched_predictions),
        unmatched_ground_truths=sub.unmatched_ground_truths,
    )


## Scores


def prf_from_counts(tp, fp, fn):
    """Fractions in [0, 1]. Zero denominators give 0"""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def precision_recall_f1(match):
    return prf_from_counts(match.tp, match.fp, match.fn)


def average_precision(scores, tp_flags, n_gt):
    """
    101-point interpolated AP. Detections are ranked by descending score
    (ties: input order) and precision is made monotone before sampling.
    No gts and no detections -> 1; no detections with gts -> 0.
    """
    scores = np.asarray(scores, dtype=float)
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if n_gt == 0:
        return 1.0 if not len(scores) else 0.0
    if not len(scores):
        return 0.0

    order = np.argsort(-scores, kind="stable")
    tp = np.cumsum(tp_flags[order])
    fp = np.cumsum(~tp_flags[order])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]

    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), precision[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(np.mean(sampled))


def epe(pairs):
    """Mean end-point error of (pred offset, gt offset) pairs. None if empty"""
    errors = _endpoint_errors(pairs)
    return float(np.mean(errors)) if len(errors) else None


def _endpoint_errors(pairs):
    return np.array([math.hypot(p[0] - g[0], p[1] - g[1]) for p, g in pairs])


## Dataset level


def _image_lookup(gts):
    """(images by id or None, annotations grouped by image)"""
    if isinstance(gts, Dataset):
        return {im.id: im for im in gts.images}, gts.by_image()
    return None, group_by_image(gts)


def _sort_predictions(preds):
    """Global order: descending score, then image id, then prediction id"""
    return sorted(
        preds,
        key=lambda p: (-p.score, utils.id_key(p.image_id), utils.id_key(p.id)),
    )


def boundary_ap50(preds, gts, d=None, threshold=0.5, track="footprint", scale=1.0):
    """
    Boundary AP50 over every image. `gts` is a Dataset (image sizes from its
    records) or a list of annotations (canvas inferred per image).
    """
    if d is not None and d < 0:
        raise ValueError(f"d must be >= 0. Got {d}")
    images, groups = _image_lookup(gts)
    pred_groups = group_by_image(preds)

    scores, flags = [], []
    n_gt = 0
    for image_id in sorted(set(groups) | set(pred_groups), key=utils.id_key):
        gi = groups.get(image_id, [])
        pi = [p for p in pred_groups.get(image_id, []) if p.polygon(track) is not None]
        n_gt += len(gi)
        shape = None
        if images is not None and image_id in images:
            shape = (images[image_id].width, images[image_id].height)
        m = match_instances(pi, gi, "boundary", threshold, track, shape, d, scale)
        scores.extend(p.score for p in pi)
        flags.extend(m.tp_flags(len(pi)))
    return average_precision(scores, flags, n_gt)


@dataclass
class _ImageResult:
    image_id: object
    mask: dict  # track -> MatchResult
    boundary_flags: dict  # track -> bool array over the track's predictions
    scores: dict  # track -> scores of the track's predictions
    n_gt: int
    epe_pairs: list


def _evaluate_image(image, preds, gts, config):
    width, height = _scaled(image.width, image.height, config.raster_scale)
    d = config.boundary_d
    if d is None:
        d = default_boundary_d(image.width, image.height)
    d *= config.raster_scale

    result = _ImageResult(image.id, {}, {}, {}, len(gts), [])
    for track in TRACKS:
        tp = [p for p in preds if p.polygon(track) is not None]
        pred_patches = rasterize_all(
            [p.polygon(track) for p in tp], width, height, config.raster_scale
        )
        gt_patches = rasterize_all(
            [_gt_polygon(g, track) for g in gts], width, height, config.raster_scale
        )
        scores = [p.score for p in tp]

        mask_iou = iou_matrix(pred_patches, gt_patches, "mask")
        match = greedy_match(scores, mask_iou, config.iou_threshold)
        bnd_iou = iou_matrix(pred_patches, gt_patches, "boundary", d)
        bmatch = greedy_match(scores, bnd_iou, config.boundary_threshold)

        result.mask[track] = match
        result.boundary_flags[track] = bmatch.tp_flags(len(tp))
        result.scores[track] = scores
        if track == "footprint":
            for p, g, _ in match.pairs:
                if tp[p].offset is not None:
                    result.epe_pairs.append((tp[p].offset, gts[g].offset))

    debug(
        f"image {image.id!r}: {len(preds)} predictions, {len(gts)} ground truths, "
        f"footprint TP {result.mask['footprint'].tp}"
    )
    return result


def _check_images(preds, gt):
    for p in preds:
        if not gt.has_image(p.image_id):
            raise UnknownImageError(
                f"Prediction {p.id!r} references image {p.image_id!r} not in the ground truth"
            )


def evaluate_dataset(preds, gt, config=None):
    """
    Full protocol over a ground-truth Dataset. Per-image matching, global
    aggregation of counts, Boundary AP50 from one global ranking, and EPE
    over footprint true positives that carry an offset.
    """
    config = config or EvalConfig()
    preds = _sort_predictions(preds)
    _check_images(preds, gt)

    pred_groups = group_by_image(preds)
    gt_groups = gt.by_image()
    images = sorted(gt.images, key=lambda im: utils.id_key(im.id))

    results = utils.ordered_map(
        lambda im: _evaluate_image(
            im, pred_groups.get(im.id, []), gt_groups[im.id], config
        ),
        images,
        jobs=config.jobs,
    )

    tracks = {}
    n_gt = sum(r.n_gt for r in results)
    for track in TRACKS:
        tp = sum(r.mask[track].tp for r in results)
        fp = sum(r.mask[track].fp for r in results)
        fn = sum(r.mask[track].fn for r in results)
        precision, recall, f1 = prf_from_counts(tp, fp, fn)

        scores = [s for r in results for s in r.scores[track]]
        flags = [f for r in results for f in r.boundary_flags[track]]
        ap = average_precision(scores, flags, n_gt)

        tracks[track] = TrackMetrics(
            precision=100.0 * precision,
            recall=100.0 * recall,
            f1=100.0 * f1,
            boundary_ap50=100.0 * ap,
            tp=tp,
            fp=fp,
            fn=fn,
        )

    errors = _endpoint_errors([pair for r in results for pair in r.epe_pairs])
    return MetricsReport(
        roof=tracks["roof"],
        footprint=tracks["footprint"],
        mean_epe=float(np.mean(errors)) if len(errors) else None,
        median_epe=float(np.median(errors)) if len(errors) else None,
        max_epe=float(np.max(errors)) if len(errors) else None,
        epe_count=int(len(errors)),
        config=config.to_json(),
    )


def with_ground_truth_offsets(preds, gt, threshold=0.5):
    """
    Replace each predicted offset by the offset of the ground truth its roof
    matches (Mask IoU, per image) and re-derive the footprint. Unmatched
    roofs keep their own offset (zero if they have none). Predictions
    without a roof are returned unchanged.
    """
    preds = _sort_predictions(preds)
    _check_images(preds, gt)
    pred_groups = group_by_image(preds)
    gt_groups = gt.by_image()

    out = []
    for image in gt.images:
        group = pred_groups.get(image.id, [])
        gts = gt_groups[image.id]
        m = match_instances(
            group, gts, "mask", threshold, "roof", (image.width, image.height)
        )
        gt_of = {p: gts[g] for p, g, _ in m.pairs}
        for ii, p in enumerate(group):
            if p.roof is None:
                out.append(p)
                continue
            offset = gt_of[ii].offset if ii in gt_of else (p.offset or OffsetVector(0.0, 0.0))
            out.append(
                PredictionInstance(
                    image_id=p.image_id,
                    footprint=derive_footprint(p.roof, offset),
                    score=p.score,
                    roof=p.roof,
                    offset=offset,
                    id=p.id,
                    bbox=p.bbox,
                )
            )
    return out


## Prediction files


def parse_prediction(rec, index):
    require_record(rec, f"annotations[{index}]")
    what = f"prediction {rec.get('id', index)!r}"
    score = require(rec, "score", what)
    try:
        score = float(score)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"{what}: score must be a number")

    roof = offset = bbox = None
    if rec.get("roof") is not None:
        roof = parse_polygon(rec["roof"], f"{what} roof")
    if rec.get("offset") is not None:
        offset = parse_offset(rec["offset"], f"{what} offset")
    if rec.get("building_bbox") is not None:
        bbox = parse_bbox(rec["building_bbox"], f"{what} building_bbox")

    if rec.get("footprint") is not None:
        footprint = parse_polygon(rec["footprint"], f"{what} footprint")
    elif roof is not None and offset is not None:
        footprint = derive_footprint(roof, offset)
    else:
        raise DatasetFormatError(f"{what} needs a footprint or a roof with an offset")

    return PredictionInstance(
        image_id=parse_id(require(rec, "image_id", what), f"{what} image_id"),
        footprint=footprint,
        score=score,
        roof=roof,
        offset=offset,
        id=parse_id(rec.get("id", index), f"{what} id"),
        bbox=bbox,
    )


def load_predictions(path):
    """Same schema as the annotation file with a mandatory "score"."""
    raw = read_json(path)
    if isinstance(raw, dict):
        records = require_list(raw, "annotations", "top level")
    elif isinstance(raw, list):
        records = raw
    else:
        raise DatasetFormatError(f"{path}: expected an object or a list")
    preds = [parse_prediction(rec, ii) for ii, rec in enumerate(records)]
    debug(f"Loaded {len(preds)} predictions from '{path}'")
    return preds


def save_predictions(preds, path):
    utils.write_json({"annotations": [p.to_json() for p in preds]}, path)
