"""Shared geometric types and coordinate conventions.

Everything inside the library lives in grid units (one unit = one cell of the
output grid). Image pixels only appear at the I/O boundary, where ``to_grid``
and ``from_grid`` convert with the grid stride.

Point arrays are ``(..., 2)`` with columns ``(x, y)``; ``x`` indexes the width
axis and ``y`` the height axis of ``(C, H, W)`` grids.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class PoseError(ValueError):
    """Base class for domain errors raised by this package."""


class NoVisibleKeypoints(PoseError):
    pass


class NonPositiveArea(PoseError):
    pass


class InvalidScale(PoseError):
    pass


class ShapeMismatch(PoseError):
    pass


class Visibility(enum.IntEnum):
    NOT_LABELED = 0
    LABELED_OCCLUDED = 1
    LABELED_VISIBLE = 2


# Per-keypoint COCO evaluation sigmas. The falloff constant used in the OKS
# exponent is twice the sigma (COCO evaluates exp(-d^2 / (2 s^2 (2 sigma)^2))).
COCO_SIGMAS = (
    0.026, 0.025, 0.025, 0.035, 0.035, 0.079, 0.079, 0.072, 0.072,
    0.062, 0.062, 0.107, 0.107, 0.087, 0.087, 0.089, 0.089,
)
COCO_KEYPOINT_NAMES = (
    "nose", "left_eye", "right_eye", "left_ear", "right_ear",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow",
    "left_wrist", "right_wrist", "left_hip", "right_hip",
    "left_knee", "right_knee", "left_ankle", "right_ankle",
)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    visibility: Visibility = Visibility.LABELED_VISIBLE

    def __post_init__(self):
        object.__setattr__(self, "visibility", Visibility(int(self.visibility)))


@dataclass(frozen=True, eq=False)
class Pose:
    """K keypoints plus a score.

    ``xy`` is a read-only ``(K, 2)`` float array and ``visibility`` a
    read-only ``(K,)`` int array with values in {0, 1, 2}.
    """

    xy: np.ndarray
    visibility: np.ndarray
    score: float = 0.0

    def __post_init__(self):
        xy = np.array(self.xy, dtype=np.float64).reshape(-1, 2)
        vis = np.array(self.visibility, dtype=np.int64).reshape(-1)
        if vis.shape[0] != xy.shape[0]:
            raise ShapeMismatch(f"{xy.shape[0]} positions but {vis.shape[0]} visibility flags")
        if np.any((vis < 0) | (vis > 2)):
            raise ValueError("visibility must be in {0, 1, 2}")
        xy.flags.writeable = False
        vis.flags.writeable = False
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "visibility", vis)
        object.__setattr__(self, "score", float(self.score))

    @classmethod
    def from_keypoints(cls, keypoints: Sequence[Keypoint], score: float = 0.0) -> Pose:
        xy = [(kp.x, kp.y) for kp in keypoints]
        vis = [int(kp.visibility) for kp in keypoints]
        return cls(np.array(xy, dtype=np.float64).reshape(-1, 2), np.array(vis), score)

    @property
    def num_keypoints(self) -> int:
        return self.xy.shape[0]

    @property
    def keypoints(self) -> tuple[Keypoint, ...]:
        return tuple(
            Keypoint(float(x), float(y), Visibility(int(v)))
            for (x, y), v in zip(self.xy, self.visibility)
        )

    def visible_mask(self) -> np.ndarray:
        return self.visibility > 0

    def with_score(self, score: float) -> Pose:
        return Pose(self.xy, self.visibility, score)

    def translated(self, dx: float, dy: float) -> Pose:
        return Pose(self.xy + np.array([dx, dy]), self.visibility, self.score)

    def __eq__(self, other):
        if not isinstance(other, Pose):
            return NotImplemented
        return (
            np.array_equal(self.xy, other.xy)
            and np.array_equal(self.visibility, other.visibility)
            and self.score == other.score
        )

    __hash__ = None


@dataclass(frozen=True)
class InstanceAnnotation:
    """Ground-truth instance.

    ``scale`` and ``center`` are in grid units; ``area`` stays in image
    pixels because the evaluator's size bands are defined on it.
    """

    pose: Pose
    scale: float
    center: tuple[float, float]
    area: float

    def __post_init__(self):
        if not np.any(self.pose.visible_mask()):
            raise NoVisibleKeypoints("annotation has no keypoint with visibility > 0")
        if not self.scale > 0:
            raise InvalidScale(f"scale must be > 0, got {self.scale}")
        if not self.area > 0:
            raise NonPositiveArea(f"area must be > 0, got {self.area}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    @classmethod
    def from_pose(cls, pose: Pose, area: float, stride: float = 1.0) -> InstanceAnnotation:
        """Build an annotation deriving center and grid-unit scale from the pose and pixel area."""
        return cls(
            pose=pose,
            scale=instance_scale(area) / stride,
            center=instance_center(pose.keypoints),
            area=area,
        )


@dataclass(frozen=True)
class GridGeometry:
    height: int
    width: int
    stride: int = 4

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("grid height and width must be >= 1")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def cell_centers(self) -> np.ndarray:
        """All lattice points as an ``(H*W, 2)`` array of ``(x, y)`` in row-major order."""
        ys, xs = np.mgrid[0:self.height, 0:self.width]
        return np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)


@dataclass(frozen=True, eq=False)
class FalloffConstants:
    k: np.ndarray = field()

    def __post_init__(self):
        k = np.array(self.k, dtype=np.float64).reshape(-1)
        if k.size == 0 or np.any(~(k > 0)):
            raise ValueError("falloff constants must be a non-empty sequence of positive reals")
        k.flags.writeable = False
        object.__setattr__(self, "k", k)

    def __len__(self):
        return self.k.shape[0]

    @classmethod
    def coco(cls) -> FalloffConstants:
        return cls(2.0 * np.array(COCO_SIGMAS))

    @classmethod
    def uniform(cls, num_keypoints: int, value: float = 0.1) -> FalloffConstants:
        return cls(np.full(num_keypoints, value))


def to_grid(point, geom: GridGeometry) -> np.ndarray:
    return np.asarray(point, dtype=np.float64) / geom.stride


def from_grid(point, geom: GridGeometry) -> np.ndarray:
    return np.asarray(point, dtype=np.float64) * geom.stride


def instance_center(ann_keypoints: Sequence[Keypoint]) -> tuple[float, float]:
    """Mean position of the keypoints with visibility > 0."""
    pts = [(kp.x, kp.y) for kp in ann_keypoints if kp.visibility > 0]
    if not pts:
        raise NoVisibleKeypoints("instance center needs at least one labeled keypoint")
    cx, cy = np.mean(np.array(pts, dtype=np.float64), axis=0)
    return float(cx), float(cy)


def instance_scale(area: float) -> float:
    if not area > 0:
        raise NonPositiveArea(f"area must be > 0, got {area}")
    return math.sqrt(area)
