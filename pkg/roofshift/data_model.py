"""
The labelled-data model: one record per building carrying its roof polygon,
the roof-to-footprint offset, the derived footprint and the building box that
covers both.

Coordinates are pixels with x to the right, y down and the origin at the
top-left corner of the image. Values are continuous (sub-pixel).
"""
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Tuple

import numpy as np

from . import debug
from . import utils

SPLITS = ("train", "val", "test", "unsplit")


class DatasetFormatError(ValueError):
    pass


class ReferentialIntegrityError(ValueError):
    pass


class DegeneratePolygonError(ValueError):
    pass


class InvalidBoxError(ValueError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


class OffsetVector(NamedTuple):
    """Roof to footprint translation in pixels"""

    ox: float
    oy: float

    @property
    def norm(self):
        return math.hypot(self.ox, self.oy)

    def __neg__(self):
        return OffsetVector(-self.ox, -self.oy)

    def __sub__(self, other):
        return OffsetVector(self.ox - other[0], self.oy - other[1])


def signed_area(vertices):
    """
    Shoelace sum / 2 in the image frame. Positive for the canonical winding,
    e.g. [(0,0),(1,0),(1,1),(0,1)] -> +1.
    """
    xy = np.asarray(vertices, dtype=float)
    if len(xy) < 3:
        return 0.0
    x, y = xy[:, 0], xy[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


@dataclass(frozen=True)
class Polygon:
    """
    Ordered vertex list of a roof or footprint. Construction validates the
    vertices and normalizes the winding so the shoelace area is positive
    (reversal keeps the first vertex in place so it is idempotent).
    """

    vertices: Tuple[Point2, ...]

    def __post_init__(self):
        try:
            verts = tuple(Point2(float(x), float(y)) for x, y in self.vertices)
        except (TypeError, ValueError) as E:
            raise DegeneratePolygonError(f"Cannot read vertices: {E}")

        if len(verts) < 3:
            raise DegeneratePolygonError(
                f"Polygon needs at least 3 vertices. Got {len(verts)}"
            )
        if not all(math.isfinite(v) for p in verts for v in p):
            raise DegeneratePolygonError("Polygon vertices must be finite")

        area = signed_area(verts)
        if area == 0:
            raise DegeneratePolygonError("Polygon has zero area")
        if area < 0:
            verts = verts[:1] + verts[:0:-1]
        object.__setattr__(self, "vertices", verts)

    def __len__(self):
        return len(self.vertices)

    def __iter__(self):
        return iter(self.vertices)

    @property
    def array(self):
        """(M, 2) float array. A new copy each call"""
        return np.array(self.vertices, dtype=float)

    @property
    def area(self):
        return signed_area(self.vertices)

    def to_json(self):
        return [[v.x, v.y] for v in self.vertices]


def as_polygon(obj):
    """Accept a Polygon or anything iterable of (x, y) pairs"""
    if isinstance(obj, Polygon):
        return obj
    return Polygon(tuple(obj))


@dataclass(frozen=True)
class BBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.x, self.y, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"Box values must be finite. Got {vals}")
        if not (self.w > 0 and self.h > 0):
            raise InvalidBoxError(f"Box needs w > 0 and h > 0. Got {vals}")

    @property
    def corners(self):
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def to_json(self):
        return [self.x, self.y, self.w, self.h]


@dataclass(frozen=True)
class BuildingAnnotation:
    id: object
    image_id: object
    roof: Polygon
    footprint: Polygon
    offset: OffsetVector
    building_bbox: BBox

    def to_json(self):
        return {
            "id": self.id,
            "image_id": self.image_id,
            "roof": self.roof.to_json(),
            "offset": [self.offset.ox, self.offset.oy],
            "footprint": self.footprint.to_json(),
            "building_bbox": self.building_bbox.to_json(),
        }


@dataclass(frozen=True)
class ImageRecord:
    id: object
    file_name: str
    width: int
    height: int

    def __post_init__(self):
        for size in (self.width, self.height):
            if isinstance(size, bool) or not isinstance(size, (int, float, np.integer)):
                raise DatasetFormatError(
                    f"Image {self.id!r}: width and height must be numbers. Got {size!r}"
                )
            if not math.isfinite(size) or int(size) != size:
                raise DatasetFormatError(f"Image {self.id!r}: size must be integer")
        if self.width <= 0 or self.height <= 0:
            raise DatasetFormatError(
                f"Image {self.id!r}: width and height must be > 0. "
                f"Got {self.width}x{self.height}"
            )
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def diagonal(self):
        return math.hypot(self.width, self.height)

    def to_json(self):
        return {
            "id": self.id,
            "file_name": self.file_name,
            "width": self.width,
            "height": self.height,
        }


@dataclass(frozen=True)
class Dataset:
    images: Tuple[ImageRecord, ...] = ()
    annotations: Tuple[BuildingAnnotation, ...] = ()
    split: str = "unsplit"
    _images_by_id: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))

        if self.split not in SPLITS:
            raise DatasetFormatError(f"split must be in {SPLITS}. Got {self.split!r}")

        lookup = {}
        for image in self.images:
            if image.id in lookup:
                raise ReferentialIntegrityError(f"Duplicate image id {image.id!r}")
            lookup[image.id] = image
        object.__setattr__(self, "_images_by_id", lookup)

        seen = set()
        for ann in self.annotations:
            if ann.id in seen:
                raise ReferentialIntegrityError(f"Duplicate annotation id {ann.id!r}")
            seen.add(ann.id)
            if ann.image_id not in lookup:
                raise ReferentialIntegrityError(
                    f"Annotation {ann.id!r} references missing image id {ann.image_id!r}"
                )

    def __len__(self):
        return len(self.annotations)

    def image(self, image_id):
        try:
            return self._images_by_id[image_id]
        except KeyError:
            raise ReferentialIntegrityError(f"Unknown image id {image_id!r}")

    def has_image(self, image_id):
        return image_id in self._images_by_id

    def by_image(self):
        """image id -> list of annotations, for every image in image order"""
        groups = {image.id: [] for image in self.images}
        for ann in self.annotations:
            groups[ann.image_id].append(ann)
        return groups

    def to_json(self):
        return {
            "split": self.split,
            "images": [image.to_json() for image in self.images],
            "annotations": [ann.to_json() for ann in self.annotations],
        }


## Derivation rules


def translate_polygon(polygon, offset):
    polygon = as_polygon(polygon)
    ox, oy = offset
    return Polygon(tuple(Point2(v.x + ox, v.y + oy) for v in polygon.vertices))


def derive_footprint(roof, offset):
    """Footprint = roof translated vertex-wise by the offset"""
    return translate_polygon(roof, offset)


def derive_building_bbox(roof, footprint):
    """Tight axis-aligned box over the vertices of both polygons"""
    xy = np.concatenate([as_polygon(roof).array, as_polygon(footprint).array])
    x0, y0 = xy.min(axis=0)
    x1, y1 = xy.max(axis=0)
    return BBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0))


def annotate_from_roof(roof, offset, image_id, id):
    roof = as_polygon(roof)
    offset = OffsetVector(float(offset[0]), float(offset[1]))
    footprint = derive_footprint(roof, offset)
    return BuildingAnnotation(
        id=id,
        image_id=image_id,
        roof=roof,
        footprint=footprint,
        offset=offset,
        building_bbox=derive_building_bbox(roof, footprint),
    )


## Validation


class Violation(NamedTuple):
    annotation_id: object
    rule: str
    magnitude: float


def _orient(a, b, c):
    return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])


def _on_segment(a, b, p):
    return min(a[0], b[0]) <= p[0] <= max(a[0], b[0]) and min(a[1], b[1]) <= p[
        1
    ] <= max(a[1], b[1])


def _segments_touch(p1, p2, q1, q2):
    d1 = _orient(q1, q2, p1)
    d2 = _orient(q1, q2, p2)
    d3 = _orient(p1, p2, q1)
    d4 = _orient(p1, p2, q2)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    return (
        (d1 == 0 and _on_segment(q1, q2, p1))
        or (d2 == 0 and _on_segment(q1, q2, p2))
        or (d3 == 0 and _on_segment(p1, p2, q1))
        or (d4 == 0 and _on_segment(p1, p2, q2))
    )


def self_intersections(polygon):
    """Number of non-adjacent edge pairs that touch or cross. O(M^2)"""
    verts = as_polygon(polygon).vertices
    M = len(verts)
    edges = [(verts[i], verts[(i + 1) % M]) for i in range(M)]
    count = 0
    for i in range(M):
        for j in range(i + 1, M):
            if j == i + 1 or (i == 0 and j == M - 1):
                continue  # adjacent edges share a vertex
            if _segments_touch(*edges[i], *edges[j]):
                count += 1
    return count


def _footprint_deviation(ann):
    roof, foot = ann.roof.array, ann.footprint.array
    if roof.shape != foot.shape:
        return math.inf
    expected = roof + np.array([ann.offset.ox, ann.offset.oy])
    return float(np.max(np.hypot(*(foot - expected).T)))


def _bbox_deviation(ann):
    tight = derive_building_bbox(ann.roof, ann.footprint).corners
    stored = ann.building_bbox.corners
    return max(abs(a - b) for a, b in zip(tight, stored))


def validate(dataset, tol=1e-6):
    """
    Check every annotation against the construction rules. Reports, never
    raises.

    Rules:
    ------
    footprint-consistency
        max vertex distance between the footprint and roof + offset
        (inf if the vertex counts differ)
    bbox-tightness
        max edge distance between the stored box and the tight box of
        roof and footprint
    roof-self-intersection, footprint-self-intersection
        number of touching/crossing non-adjacent edge pairs

    Returns a list of Violation(annotation_id, rule, magnitude) sorted by
    annotation id.
    """
    violations = []
    for ann in dataset.annotations:
        mag = _footprint_deviation(ann)
        if mag > tol:
            violations.append(Violation(ann.id, "footprint-consistency", mag))

        mag = _bbox_deviation(ann)
        if mag > tol:
            violations.append(Violation(ann.id, "bbox-tightness", mag))

        for name in ("roof", "footprint"):
            count = self_intersections(getattr(ann, name))
            if count:
                violations.append(
                    Violation(ann.id, f"{name}-self-intersection", float(count))
                )

    violations.sort(key=lambda v: utils.id_key(v.annotation_id))  # stable
    debug(f"validate: {len(violations)} violations at tol {tol}")
    return violations


## Serialization


def read_json(path):
    """Read a JSON file, turning parse errors into DatasetFormatError with context"""
    try:
        with open(path, "rt", encoding="utf-8") as file:
            text = file.read()
    except OSError as E:
        raise DatasetFormatError(f"Cannot read '{path}': {E.strerror or E}")

    try:
        return json.loads(text)
    except json.JSONDecodeError as E:
        lines = text.split("\n")
        context = lines[E.lineno - 1] if 0 < E.lineno <= len(lines) else ""
        raise DatasetFormatError(
            f"{path}:{E.lineno}:{E.colno}: {E.msg}\n    {context.strip()[:120]}"
        )


def parse_polygon(obj, what):
    if not isinstance(obj, (list, tuple)):
        raise DatasetFormatError(f"{what} must be a list of [x, y] pairs")
    try:
        pairs = tuple((float(p[0]), float(p[1])) for p in obj)
    except (TypeError, ValueError, IndexError):
        raise DatasetFormatError(f"{what} must be a list of [x, y] pairs")
    try:
        return Polygon(pairs)
    except DegeneratePolygonError as E:
        raise DegeneratePolygonError(f"{what}: {E}")


def parse_offset(obj, what):
    try:
        ox, oy = (float(v) for v in obj)
    except (TypeError, ValueError):
        raise DatasetFormatError(f"{what} must be [ox, oy]")
    if not (math.isfinite(ox) and math.isfinite(oy)):
        raise DatasetFormatError(f"{what} must be finite")
    return OffsetVector(ox, oy)


def parse_bbox(obj, what):
    try:
        return BBox(*(float(v) for v in obj))
    except (TypeError, ValueError) as E:
        raise DatasetFormatError(f"{what}: {E}")


def require(record, key, what):
    try:
        return record[key]
    except (KeyError, TypeError):
        raise DatasetFormatError(f"{what} is missing '{key}'")


def require_list(record, key, what):
    value = require(record, key, what)
    if not isinstance(value, list):
        raise DatasetFormatError(f"{what} '{key}' must be a list. Got {type(value).__name__}")
    return value


def require_record(rec, what):
    if not isinstance(rec, dict):
        raise DatasetFormatError(f"{what} must be an object. Got {type(rec).__name__}")
    return rec


def parse_id(value, what):
    """Identifiers are JSON strings or integers"""
    if isinstance(value, bool) or not isinstance(value, (int, str)):
        raise DatasetFormatError(f"{what} must be a string or an integer. Got {value!r}")
    return value


def parse_images(raw):
    images = []
    for ii, rec in enumerate(require_list(raw, "images", "top level")):
        what = f"images[{ii}]"
        require_record(rec, what)
        images.append(
            ImageRecord(
                id=parse_id(require(rec, "id", what), f"{what} id"),
                file_name=str(rec.get("file_name", "")),
                width=require(rec, "width", what),
                height=require(rec, "height", what),
            )
        )
    return images


def parse_annotation(rec, what):
    """Build an annotation, deriving the optional footprint and box"""
    require_record(rec, what)
    ann_id = parse_id(require(rec, "id", what), f"{what} id")
    what = f"annotation {ann_id!r}"
    roof = parse_polygon(require(rec, "roof", what), f"{what} roof")
    offset = parse_offset(require(rec, "offset", what), f"{what} offset")

    if rec.get("footprint") is not None:
        footprint = parse_polygon(rec["footprint"], f"{what} footprint")
    else:
        footprint = derive_footprint(roof, offset)

    if rec.get("building_bbox") is not None:
        bbox = parse_bbox(rec["building_bbox"], f"{what} building_bbox")
    else:
        bbox = derive_building_bbox(roof, footprint)

    return BuildingAnnotation(
        id=ann_id,
        image_id=parse_id(require(rec, "image_id", what), f"{what} image_id"),
        roof=roof,
        footprint=footprint,
        offset=offset,
        building_bbox=bbox,
    )


def load_dataset(path, split=None):
    """
    Load the annotation JSON:

        {"images": [{"id", "file_name", "width", "height"}, ...],
         "annotations": [{"id", "image_id", "roof": [[x,y],...],
                          "offset": [ox,oy],
                          "footprint": [[x,y],...],   (optional)
                          "building_bbox": [x,y,w,h]  (optional)}, ...],
         "split": "train"                             (optional)}

    Missing footprints and boxes are derived from roof + offset.
    """
    raw = read_json(path)
    if not isinstance(raw, dict):
        raise DatasetFormatError(f"{path}: top level must be an object")

    images = parse_images(raw)
    annotations = [
        parse_annotation(rec, f"annotations[{ii}]")
        for ii, rec in enumerate(require_list(raw, "annotations", "top level"))
    ]
    split = split or raw.get("split", "unsplit")
    dataset = Dataset(images=images, annotations=annotations, split=split)
    debug(f"Loaded '{path}': {len(dataset.images)} images, {len(dataset)} annotations")
    return dataset


def save_dataset(dataset, path):
    utils.write_json(dataset.to_json(), path)


def group_by_image(items):
    """Group anything with an `image_id` attribute, keeping order"""
    groups = defaultdict(list)
    for item in items:
        groups[item.image_id].append(item)
    return groups
