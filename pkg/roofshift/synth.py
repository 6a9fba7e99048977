"""
Deterministic synthetic off-nadir scenes, controlled-error predictions and
offset-bearing feature maps for the toy regressor.

Every random draw comes from a stream keyed by (seed, purpose) so changing
one knob never reshuffles the others.
"""
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import debug
from .data_model import (
    Dataset,
    DegeneratePolygonError,
    ImageRecord,
    OffsetVector,
    Polygon,
    annotate_from_roof,
    derive_building_bbox,
    derive_footprint,
)
from .evaluation import PredictionInstance
from .foa import FeatureMap, FeatureShapeError, rotation_matrix
from .geometry import patch_iou, rasterize_patch

FOOTPRINT_KINDS = ("rectangle", "l_shape")
SCORE_MODELS = ("iou_linked", "uniform")
MIN_SCORE = 0.05
PLACEMENT_TRIES = 100  # per requested building

STREAMS = {
    "placement": 10,
    "azimuth": 11,
    "drops": 20,
    "jitter": 21,
    "offset": 22,
    "spurious": 23,
    "scores": 24,
}


class PlacementError(ValueError):
    pass


def stream(seed, purpose):
    return np.random.default_rng([int(seed), STREAMS[purpose]])


def _pair(value, name):
    lo, hi = (float(v) for v in value)
    if not 0 <= lo <= hi:
        raise ValueError(f"{name} must be (lo, hi) with 0 <= lo <= hi. Got {value}")
    return lo, hi


@dataclass(frozen=True)
class SceneConfig:
    width: int = 512
    height: int = 512
    n_buildings: int = 20
    n_images: int = 1
    height_range: Tuple[float, float] = (6.0, 60.0)  # meters
    gsd: float = 0.6  # meters / pixel
    nadir_angle: float = 30.0  # degrees off-nadir
    azimuth: Optional[float] = None  # radians. None: random per image
    azimuth_per_building: bool = False  # with azimuth None, draw per building
    footprint_kind: str = "rectangle"
    size_range: Tuple[float, float] = (16.0, 48.0)  # roof side lengths, pixels
    gap: float = 2.0  # minimum spacing between building boxes, pixels
    seed: int = 0
    split: str = "unsplit"

    def __post_init__(self):
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError(f"Scene size must be > 0. Got {self.width}x{self.height}")
        if not 0 <= self.nadir_angle <= 60:
            raise ValueError(f"nadir_angle must be in [0, 60]. Got {self.nadir_angle}")
        if not self.gsd > 0:
            raise ValueError(f"gsd must be > 0. Got {self.gsd}")
        if self.n_buildings < 0 or self.n_images < 0:
            raise ValueError("n_buildings and n_images must be >= 0")
        if self.footprint_kind not in FOOTPRINT_KINDS:
            raise ValueError(
                f"footprint_kind must be in {FOOTPRINT_KINDS}. Got {self.footprint_kind!r}"
            )
        object.__setattr__(self, "height_range", _pair(self.height_range, "height_range"))
        size = _pair(self.size_range, "size_range")
        if size[0] <= 0:
            raise ValueError("size_range must be > 0")
        object.__setattr__(self, "size_range", size)

    @classmethod
    def from_config(cls, config, **overrides):
        kwargs = {
            "width": config.scene_width,
            "height": config.scene_height,
            "n_buildings": config.n_buildings,
            "n_images": config.n_images,
            "height_range": config.height_range,
            "gsd": config.gsd,
            "nadir_angle": config.nadir_angle,
            "azimuth": config.azimuth,
            "azimuth_per_building": config.azimuth_per_building,
            "footprint_kind": config.footprint_kind,
            "size_range": config.size_range,
            "gap": config.building_gap,
            "seed": config.seed,
            "split": config.split,
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


@dataclass(frozen=True)
class NoiseConfig:
    vertex_jitter_sigma: float = 0.0  # pixels
    offset_noise_sigma: float = 0.0  # pixels, per component
    drop_rate: float = 0.0
    spurious_rate: float = 0.0  # expected false positives per image
    spurious_size: Tuple[float, float] = (16.0, 48.0)
    score_model: str = "iou_linked"
    seed: int = 0

    def __post_init__(self):
        if self.vertex_jitter_sigma < 0 or self.offset_noise_sigma < 0:
            raise ValueError("Noise sigmas must be >= 0")
        if not 0 <= self.drop_rate <= 1:
            raise ValueError(f"drop_rate must be in [0, 1]. Got {self.drop_rate}")
        if self.spurious_rate < 0:
            raise ValueError(f"spurious_rate must be >= 0. Got {self.spurious_rate}")
        if self.score_model not in SCORE_MODELS:
            raise ValueError(
                f"score_model must be in {SCORE_MODELS}. Got {self.score_model!r}"
            )
        object.__setattr__(self, "spurious_size", _pair(self.spurious_size, "spurious_size"))

    @classmethod
    def from_config(cls, config, **overrides):
        kwargs = {
            "vertex_jitter_sigma": config.vertex_jitter_sigma,
            "offset_noise_sigma": config.offset_noise_sigma,
            "drop_rate": config.drop_rate,
            "spurious_rate": config.spurious_rate,
            "score_model": config.score_model,
            "seed": config.seed if config.noise_seed is None else config.noise_seed,
        }
        kwargs.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kwargs)


## Scenes


def offset_for_height(building_height, gsd, nadir_angle, azimuth):
    """
    Pinhole model: |o| = h tan(nadir) / gsd pixels, pointing along azimuth
    (radians, image frame).
    """
    if not 0 <= nadir_angle <= 60:
        raise ValueError(f"nadir_angle must be in [0, 60]. Got {nadir_angle}")
    rho = building_height * math.tan(math.radians(nadir_angle)) / gsd
    return OffsetVector(rho * math.cos(azimuth), rho * math.sin(azimuth))


def _roof_polygon(kind, x, y, w, h, rng):
    if kind == "rectangle":
        return Polygon(((x, y), (x + w, y), (x + w, y + h), (x, y + h)))
    # L: top-right notch removed
    a = w * rng.uniform(0.4, 0.7)
    b = h * rng.uniform(0.3, 0.6)
    return Polygon(
        ((x, y), (x + a, y), (x + a, y + b), (x + w, y + b), (x + w, y + h), (x, y + h))
    )


def _place_buildings(config, image_id, rng, az_rng, image_azimuth):
    """
    Rejection sampling of roof + offset pairs whose building box (roof and
    footprint together) lies in the image and keeps `gap` from every other.
    """
    n = config.n_buildings
    budget = PLACEMENT_TRIES * n
    boxes = np.zeros((0, 4))
    placed = []
    attempts = 0
    while len(placed) < n:
        if attempts >= budget:
            raise PlacementError(
                f"Placed {len(placed)} of {n} buildings in image {image_id!r} "
                f"after {attempts} attempts"
            )
        attempts += 1

        azimuth = image_azimuth
        if config.azimuth is None and config.azimuth_per_building:
            azimuth = az_rng.uniform(0.0, 2.0 * math.pi)
        offset = offset_for_height(
            rng.uniform(*config.height_range), config.gsd, config.nadir_angle, azimuth
        )
        w, h = rng.uniform(*config.size_range, size=2)
        ox, oy = offset

        lo_x, hi_x = -min(0.0, ox), config.width - w - max(0.0, ox)
        lo_y, hi_y = -min(0.0, oy), config.height - h - max(0.0, oy)
        if hi_x < lo_x or hi_y < lo_y:
            continue
        x, y = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)

        box = (x + min(0.0, ox), y + min(0.0, oy), x + w + max(0.0, ox), y + h + max(0.0, oy))
        g = config.gap
        if np.any(
            (boxes[:, 0] < box[2] + g)
            & (box[0] - g < boxes[:, 2])
            & (boxes[:, 1] < box[3] + g)
            & (box[1] - g < boxes[:, 3])
        ):
            continue

        boxes = np.vstack([boxes, box])
        placed.append((_roof_polygon(config.footprint_kind, x, y, w, h, rng), offset))

    debug(f"image {image_id!r}: placed {n} buildings in {attempts} attempts")
    return placed


def generate_scene(config):
    """
    Ground-truth Dataset of n_images images with n_buildings each. Image and
    annotation ids count from 1.
    """
    placement = stream(config.seed, "placement")
    az_rng = stream(config.seed, "azimuth")

    images, annotations = [], []
    for index in range(1, config.n_images + 1):
        image = ImageRecord(
            id=index,
            file_name=f"synth_{config.seed}_{index:04d}.png",
            width=int(config.width),
            height=int(config.height),
        )
        image_azimuth = config.azimuth
        if image_azimuth is None:
            image_azimuth = az_rng.uniform(0.0, 2.0 * math.pi)

        for roof, offset in _place_buildings(config, image.id, placement, az_rng, image_azimuth):
            annotations.append(
                annotate_from_roof(roof, offset, image.id, len(annotations) + 1)
            )
        images.append(image)

    return Dataset(images=images, annotations=annotations, split=config.split)


## Predictions


def _score(noise, footprint, gt_footprints, image):
    if noise.score_model == "uniform":
        return 1.0
    pred = rasterize_patch(footprint, image.width, image.height)
    best = max(
        (patch_iou(pred, rasterize_patch(g, image.width, image.height)) for g in gt_footprints),
        default=0.0,
    )
    return float(min(1.0, max(MIN_SCORE, best)))


def _jittered(roof, jitter):
    try:
        return Polygon(tuple(map(tuple, roof.array + jitter)))
    except DegeneratePolygonError:
        return roof


def perturb_predictions(gt, noise=None):
    """
    Predictions from a ground-truth Dataset. Kept annotations get Gaussian
    roof-vertex jitter and offset noise and a footprint re-derived from both;
    each image gets Poisson(spurious_rate) spurious rectangles.

    Scores: iou_linked is the Mask IoU of the predicted footprint against its
    source footprint (the best-overlapping one for spurious predictions)
    clipped to [0.05, 1]; uniform scores every prediction 1.0.
    """
    noise = noise or NoiseConfig()
    drops = stream(noise.seed, "drops")
    jitter = stream(noise.seed, "jitter")
    offsets = stream(noise.seed, "offset")
    spurious = stream(noise.seed, "spurious")

    groups = gt.by_image()
    preds = []
    for image in gt.images:
        anns = groups[image.id]
        for ann in anns:
            # draw every stream for every annotation so the knobs stay independent
            keep = drops.random() >= noise.drop_rate
            j = jitter.standard_normal((len(ann.roof), 2)) * noise.vertex_jitter_sigma
            z = offsets.standard_normal(2) * noise.offset_noise_sigma
            if not keep:
                continue

            roof = _jittered(ann.roof, j) if noise.vertex_jitter_sigma else ann.roof
            offset = OffsetVector(ann.offset.ox + float(z[0]), ann.offset.oy + float(z[1]))
            footprint = derive_footprint(roof, offset)
            preds.append(
                PredictionInstance(
                    image_id=image.id,
                    footprint=footprint,
                    score=_score(noise, footprint, [ann.footprint], image),
                    roof=roof,
                    offset=offset,
                    id=ann.id,
                    bbox=derive_building_bbox(roof, footprint),
                )
            )

        for k in range(int(spurious.poisson(noise.spurious_rate))):
            w, h = spurious.uniform(*noise.spurious_size, size=2)
            w, h = min(w, image.width), min(h, image.height)
            x = spurious.uniform(0.0, image.width - w)
            y = spurious.uniform(0.0, image.height - h)
            pick = int(spurious.integers(len(anns))) if anns else None
            offset = anns[pick].offset if anns else OffsetVector(0.0, 0.0)
            roof = Polygon(((x, y), (x + w, y), (x + w, y + h), (x, y + h)))
            footprint = derive_footprint(roof, offset)
            preds.append(
                PredictionInstance(
                    image_id=image.id,
                    footprint=footprint,
                    score=_score(noise, footprint, [a.footprint for a in anns], image),
                    roof=roof,
                    offset=offset,
                    id=f"spurious-{image.id}-{k + 1}",
                    bbox=derive_building_bbox(roof, footprint),
                )
            )

    debug(f"perturb_predictions: {len(preds)} predictions from {len(gt)} annotations")
    return preds


## Features


def generate_feature_for_offset(offset, channels, height, width, scale=16.0):
    """
    C x H x W feature map encoding `offset` as oriented ramps under a smooth
    radial window. Channel c ramps along the offset mirrored in the x axis
    and turned by pi c / C, with slope |o| / scale. The window vanishes at
    the unit circle so

        generate(A_theta o) == rotate_feature_map(generate(o), theta)

    holds up to interpolation error.
    """
    if height != width:
        raise FeatureShapeError(f"Feature maps must be square. Got {height}x{width}")
    n = int(height)
    centre = 0.5 * (n - 1)
    u = (np.arange(n, dtype=float) - centre) / (centre if centre else 1.0)
    x, y = np.meshgrid(u, u)
    r2 = x * x + y * y
    window = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)

    mirrored = np.array([offset[0], -offset[1]], dtype=float) / scale
    values = np.empty((int(channels), n, n))
    for c in range(int(channels)):
        a, b = rotation_matrix(math.pi * c / channels) @ mirrored
        values[c] = window * (a * x + b * y)
    return FeatureMap(values)
