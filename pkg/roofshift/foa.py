"""
Feature-level offset augmentation math: rotation of offsets and of pooled
feature maps, the polar form of an offset, and fusion of the per-branch
predictions back into one offset.

Feature maps are sampled target -> source: the value at target grid point t
is read at source A_theta t, with coordinates centred on the map and scaled
to [-1, 1]. Samples that fall outside the map read as 0.
"""
import enum
import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from .data_model import OffsetVector

TWO_PI = 2.0 * math.pi
QUARTER_TOL = 1e-12


class FeatureShapeError(ValueError):
    pass


class EmptyBranchError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureMap:
    values: np.ndarray  # (C, H, W)

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim == 2:
            values = values[None]
        if values.ndim != 3:
            raise FeatureShapeError(f"Expected a C x H x W array. Got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise FeatureShapeError("Feature values must be finite")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def height(self):
        return self.values.shape[1]

    @property
    def width(self):
        return self.values.shape[2]

    @property
    def size(self):
        return self.values.size


@dataclass(frozen=True)
class RotationAngleSet:
    angles: Tuple[float, ...] = (0.0, 0.5 * math.pi, math.pi, 1.5 * math.pi)

    def __post_init__(self):
        angles = tuple(float(a) for a in self.angles)
        if not angles:
            raise EmptyBranchError("Need at least one rotation angle")
        if angles[0] != 0:
            raise ValueError(f"The first angle must be 0. Got {angles[0]}")
        object.__setattr__(self, "angles", angles)

    @classmethod
    def from_degrees(cls, degrees):
        return cls(tuple(math.radians(float(d)) for d in degrees))

    def degrees(self):
        return [math.degrees(a) for a in self.angles]

    def __len__(self):
        return len(self.angles)

    def __iter__(self):
        return iter(self.angles)


def default_angles():
    return RotationAngleSet()


class FusionStrategy(str, enum.Enum):
    MAX_NORM = "max_norm"
    MEAN = "mean"
    MAX_COMPONENT = "max_component"


def _cos_sin(theta):
    """cos and sin, exact at multiples of pi/2 so quarter turns permute grids"""
    if not math.isfinite(theta):
        raise ValueError(f"Angle must be finite. Got {theta}")
    k = round(theta / (0.5 * math.pi))
    if abs(theta - k * 0.5 * math.pi) < QUARTER_TOL:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k % 4]
    return math.cos(theta), math.sin(theta)


def rotation_matrix(theta):
    c, s = _cos_sin(theta)
    return np.array([[c, -s], [s, c]])


def rotate_offset(offset, theta):
    ox, oy = rotation_matrix(theta) @ np.array([offset[0], offset[1]], dtype=float)
    return OffsetVector(float(ox), float(oy))


def inverse_rotate_offset(offset_star, theta):
    """A_theta^T o* == A_{-theta} o*"""
    ox, oy = rotation_matrix(theta).T @ np.array(
        [offset_star[0], offset_star[1]], dtype=float
    )
    return OffsetVector(float(ox), float(oy))


def _source_coords(n, theta):
    """Row/column source indices for every target point of an n x n grid"""
    centre = 0.5 * (n - 1)
    c, s = _cos_sin(theta)
    u = np.arange(n, dtype=float) - centre
    ux, uy = np.meshgrid(u, u)  # ux varies along columns, uy along rows
    # normalisation by `centre` is the same on both axes so it cancels
    xs = centre + (c * ux - s * uy)
    ys = centre + (s * ux + c * uy)
    return ys, xs


def rotate_feature_map(feature, theta):
    """
    Rotate every channel by bilinear sampling at [x_s, y_s] = A_theta [x_t, y_t].
    Only square maps are accepted.
    """
    if not isinstance(feature, FeatureMap):
        feature = FeatureMap(feature)
    if feature.height != feature.width:
        raise FeatureShapeError(
            f"Rotation needs a square map. Got {feature.height}x{feature.width}"
        )
    n = feature.height
    ys, xs = _source_coords(n, theta)
    tol = 1e-9
    outside = (xs < -tol) | (xs > n - 1 + tol) | (ys < -tol) | (ys > n - 1 + tol)
    coords = np.stack([np.clip(ys, 0, n - 1), np.clip(xs, 0, n - 1)])

    out = np.empty_like(feature.values)
    for ch, plane in enumerate(feature.values):
        out[ch] = ndimage.map_coordinates(plane, coords, order=1, mode="nearest")
    out[:, outside] = 0.0
    return FeatureMap(out)


def fuse_offsets(candidates, strategy=FusionStrategy.MAX_NORM):
    """
    Fuse per-branch offsets (already rotated back).

    max_norm
        the candidate with the largest Euclidean norm, lowest branch index
        on ties
    mean
        component-wise average
    max_component
        per component, the value with the largest magnitude (lowest branch
        on ties)
    """
    candidates = [OffsetVector(float(c[0]), float(c[1])) for c in candidates]
    if not candidates:
        raise EmptyBranchError("Cannot fuse an empty list of offsets")
    strategy = FusionStrategy(strategy)

    arr = np.array(candidates)
    if strategy is FusionStrategy.MAX_NORM:
        norms = np.hypot(arr[:, 0], arr[:, 1])
        return candidates[int(np.argmax(norms))]
    if strategy is FusionStrategy.MEAN:
        ox, oy = arr.mean(axis=0)
        return OffsetVector(float(ox), float(oy))

    pick = np.argmax(np.abs(arr), axis=0)
    return OffsetVector(float(arr[pick[0], 0]), float(arr[pick[1], 1]))


def to_polar(offset):
    """(rho, theta) with rho >= 0 and theta in [0, 2 pi). (0, 0) -> (0, 0)"""
    ox, oy = float(offset[0]), float(offset[1])
    rho = math.hypot(ox, oy)
    if rho == 0:
        return 0.0, 0.0
    theta = math.atan2(oy, ox) % TWO_PI
    if theta >= TWO_PI:  # -tiny % 2pi rounds up to 2pi
        theta = 0.0
    return rho, theta


def from_polar(rho, theta):
    if rho < 0:
        raise ValueError(f"rho must be >= 0. Got {rho}")
    return OffsetVector(rho * math.cos(theta), rho * math.sin(theta))
