"""
Raster/vector conversions and the IoU measures used by evaluation.

Masks are image-sized boolean grids. Pixel (i, j) (column i, row j) covers
[i, i+1] x [j, j+1] and is "inside" a polygon when its centre is, under the
nonzero winding rule.
"""
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import debug
from .data_model import Polygon, derive_footprint, signed_area

BOUNDARY_DILATION_RATIO = 0.02


class DimensionMismatchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BitMask:
    width: int
    height: int
    bits: np.ndarray  # (height, width) bool, row-major

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool)
        if bits.ndim == 1 and bits.size == self.width * self.height:
            bits = bits.reshape(self.height, self.width)
        if bits.shape != (self.height, self.width):
            raise DimensionMismatchError(
                f"bits shape {bits.shape} does not match {self.height}x{self.width}"
            )
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, np.zeros((height, width), dtype=bool))

    @property
    def count(self):
        return int(self.bits.sum())

    def __eq__(self, other):
        if not isinstance(other, BitMask):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and bool(
            np.array_equal(self.bits, other.bits)
        )

    def to_pbm(self, path):
        """Dump as binary PBM (P4). Set pixels are black (1)"""
        packed = np.packbits(self.bits.astype(np.uint8), axis=1)
        with open(path, "wb") as file:
            file.write(f"P4\n{self.width} {self.height}\n".encode("ascii"))
            file.write(packed.tobytes())


@dataclass(frozen=True, eq=False)
class MaskPatch:
    """
    An image-sized mask stored as the window [x0, x0+w) x [y0, y0+h) that
    holds all of its set pixels. Everything outside the window is unset.
    """

    width: int
    height: int
    x0: int
    y0: int
    bits: np.ndarray

    @property
    def count(self):
        return int(self.bits.sum())

    def to_bitmask(self):
        full = np.zeros((self.height, self.width), dtype=bool)
        h, w = self.bits.shape
        full[self.y0 : self.y0 + h, self.x0 : self.x0 + w] = self.bits
        return BitMask(self.width, self.height, full)

    @classmethod
    def from_bitmask(cls, mask):
        rows = np.flatnonzero(mask.bits.any(axis=1))
        cols = np.flatnonzero(mask.bits.any(axis=0))
        if not rows.size:
            return cls.empty(mask.width, mask.height)
        r0, r1, c0, c1 = rows[0], rows[-1] + 1, cols[0], cols[-1] + 1
        return cls(mask.width, mask.height, int(c0), int(r0), mask.bits[r0:r1, c0:c1])

    @classmethod
    def empty(cls, width, height):
        return cls(width, height, 0, 0, np.zeros((0, 0), dtype=bool))


def _check_dims(width, height):
    if int(width) <= 0 or int(height) <= 0:
        raise ValueError(f"width and height must be > 0. Got {width}x{height}")
    return int(width), int(height)


## Rasterization


def _vertex_array(polygon):
    if isinstance(polygon, Polygon):
        return polygon.array
    xy = np.asarray(polygon, dtype=float)
    if xy.ndim != 2 or (xy.size and xy.shape[1] != 2):
        return np.zeros((0, 2))
    return xy


def rasterize_patch(polygon, width, height, scale=1.0):
    """
    Scanline fill of one polygon into a MaskPatch of a width x height grid.

    Each row's centre line y = j + 0.5 is crossed with every edge using the
    half-open rule min(y0, y1) <= y < max(y0, y1); crossings are sorted and
    the winding number accumulated left to right. Pixels whose centre falls
    in a span of nonzero winding are set. Degenerate input gives an empty
    patch. `scale` multiplies the vertex coordinates first.
    """
    width, height = _check_dims(width, height)
    xy = _vertex_array(polygon) * scale
    if len(xy) < 3 or not np.all(np.isfinite(xy)) or signed_area(xy) == 0:
        return MaskPatch.empty(width, height)

    xmin, ymin = xy.min(axis=0)
    xmax, ymax = xy.max(axis=0)
    j0 = max(0, math.ceil(ymin - 0.5))
    j1 = min(height - 1, math.ceil(ymax - 0.5) - 1)
    i0 = max(0, math.ceil(xmin - 0.5))
    i1 = min(width - 1, math.ceil(xmax - 0.5) - 1)
    if j1 < j0 or i1 < i0:
        return MaskPatch.empty(width, height)

    bits = np.zeros((j1 - j0 + 1, i1 - i0 + 1), dtype=bool)

    x0, y0 = xy[:, 0], xy[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    keep = y0 != y1  # horizontal edges never cross a centre line
    x0, y0, x1, y1 = x0[keep], y0[keep], x1[keep], y1[keep]
    direction = np.where(y1 > y0, 1, -1)
    ylo, yhi = np.minimum(y0, y1), np.maximum(y0, y1)
    slope = (x1 - x0) / (y1 - y0)

    for row, j in enumerate(range(j0, j1 + 1)):
        yc = j + 0.5
        hit = (ylo <= yc) & (yc < yhi)
        if not hit.any():
            continue
        xs = x0[hit] + (yc - y0[hit]) * slope[hit]
        order = np.argsort(xs, kind="stable")
        xs = xs[order]
        winding = np.cumsum(direction[hit][order])
        for k in range(len(xs) - 1):
            if winding[k] == 0:
                continue
            ca = max(i0, math.ceil(xs[k] - 0.5))
            cb = min(i1 + 1, math.ceil(xs[k + 1] - 0.5))
            if cb > ca:
                bits[row, ca - i0 : cb - i0] = True

    return MaskPatch(width, height, i0, j0, bits)


def rasterize(polygon, width, height):
    """Full-grid rasterization. See rasterize_patch"""
    return rasterize_patch(polygon, width, height).to_bitmask()


def polygon_area(polygon):
    return abs(signed_area(_vertex_array(polygon)))


def translate_mask(mask, dx, dy):
    """Shift by integer pixels. Pixels that leave the grid are dropped"""
    dx, dy = int(dx), int(dy)
    out = np.zeros_like(mask.bits)
    h, w = mask.bits.shape
    src = mask.bits[max(0, -dy) : h - max(0, dy), max(0, -dx) : w - max(0, dx)]
    out[max(0, dy) : max(0, dy) + src.shape[0], max(0, dx) : max(0, dx) + src.shape[1]] = src
    return BitMask(mask.width, mask.height, out)


## Contours


def _trace_outer(img):
    """
    Follow the outer crack boundary of the component containing the first
    set pixel (row-major) of `img`, keeping the foreground on the right.
    8-connected: at a corner the left-ahead pixel is tried first.

    Vertices sit on pixel corners rather than pixel centres so that
    rasterizing the traced polygon gives back exactly the component.

    `img` must have a False border. Returns (K, 2) corner coordinates (x, y)
    where the direction changes.
    """
    rows, cols = img.shape
    r0, c0 = divmod(int(np.flatnonzero(img)[0]), cols)

    def fg(c, r):
        return 0 <= r < rows and 0 <= c < cols and bool(img[r, c])

    start = (c0, r0)
    X, Y = start
    dx, dy = 0, -1  # arrive going up the left edge of the start pixel
    corners = []
    while True:
        rx, ry = -dy, dx
        lx, ly = dy, -dx
        ahead_left = fg(X + (dx + lx - 1) // 2, Y + (dy + ly - 1) // 2)
        ahead_right = fg(X + (dx + rx - 1) // 2, Y + (dy + ry - 1) // 2)
        if ahead_left:
            ndx, ndy = lx, ly
        elif ahead_right:
            ndx, ndy = dx, dy
        else:
            ndx, ndy = rx, ry

        if (ndx, ndy) != (dx, dy):
            corners.append((X, Y))
        dx, dy = ndx, ndy
        X += dx
        Y += dy
        if (X, Y) == start:
            break
    return np.array(corners, dtype=float)


EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


def mask_to_polygons(mask):
    """
    One outer-contour polygon per 8-connected component, vertices on pixel
    corners, in component order (first pixel in row-major order). Holes are
    dropped.
    """
    labels, n = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    polygons = []
    for k, sl in enumerate(ndimage.find_objects(labels), 1):
        comp = np.pad(labels[sl] == k, 1)
        corners = _trace_outer(comp)
        corners += (sl[1].start - 1, sl[0].start - 1)
        polygons.append(Polygon(tuple(map(tuple, corners))))
    debug(f"mask_to_polygons: {n} components")
    return polygons


def footprint_from_roof_mask(mask, offset):
    """Inference path: roof mask -> roof polygons -> translated footprints"""
    return [derive_footprint(roof, offset) for roof in mask_to_polygons(mask)]


## IoU


def _same_dims(a, b):
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatchError(
            f"Mask sizes differ: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def mask_iou(a, b):
    """|a & b| / |a | b|, 1.0 when both are empty"""
    _same_dims(a, b)
    union = np.logical_or(a.bits, b.bits).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a.bits, b.bits).sum() / union)


def _band(bits, d):
    if d < 0:
        raise ValueError(f"d must be >= 0. Got {d}")
    if not bits.size:
        return bits.copy()
    # the padding ring plays the image border
    edt = ndimage.distance_transform_edt(np.pad(bits, 1))[1:-1, 1:-1]
    return bits & (edt <= d + 1)


def boundary_band(mask, d):
    """
    Foreground pixels within distance d of the complement (image border is
    background). The distance of a pixel touching the background is 0, so
    d = 0 gives the 4-connected inner contour.
    """
    return BitMask(mask.width, mask.height, _band(mask.bits, d))


def boundary_iou(a, b, d):
    _same_dims(a, b)
    return mask_iou(boundary_band(a, d), boundary_band(b, d))


def default_boundary_d(width, height):
    return BOUNDARY_DILATION_RATIO * math.hypot(width, height)


def patch_band(patch, d):
    return MaskPatch(patch.width, patch.height, patch.x0, patch.y0, _band(patch.bits, d))


def patch_iou(a, b):
    """mask_iou for two patches of the same grid without expanding them"""
    _same_dims(a, b)
    ca, cb = a.count, b.count
    ha, wa = a.bits.shape
    hb, wb = b.bits.shape
    x0, x1 = max(a.x0, b.x0), min(a.x0 + wa, b.x0 + wb)
    y0, y1 = max(a.y0, b.y0), min(a.y0 + ha, b.y0 + hb)
    inter = 0
    if x1 > x0 and y1 > y0:
        sa = a.bits[y0 - a.y0 : y1 - a.y0, x0 - a.x0 : x1 - a.x0]
        sb = b.bits[y0 - b.y0 : y1 - b.y0, x0 - b.x0 : x1 - b.x0]
        inter = int(np.logical_and(sa, sb).sum())
    union = ca + cb - inter
    if union == 0:
        return 1.0
    return inter / union
