"""Training-target construction: instance regions, weight map, offsets, score map."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .core import FalloffConstants, GridGeometry, InstanceAnnotation, NoVisibleKeypoints, Pose, ShapeMismatch
from .oks import oks_arrays

NONE = -1
FOREGROUND_WEIGHT = 1.0
BACKGROUND_WEIGHT = 0.1
DEFAULT_GAMMA = 4.0


@dataclass(frozen=True, eq=False)
class RegionAssignment:
    """Per-cell instance index (``NONE`` for background) and the region radius."""

    index: np.ndarray
    gamma: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.index.shape

    def assigned_cells(self) -> np.ndarray:
        """``(M, 2)`` integer ``(x, y)`` of every assigned cell in row-major order."""
        ys, xs = np.nonzero(self.index != NONE)
        return np.stack([xs, ys], axis=1)


@dataclass(frozen=True, eq=False)
class OffsetTarget:
    """``(2K, H, W)`` cell-minus-keypoint offsets and the matching boolean mask.

    Channel ``2i`` holds the x offset of keypoint ``i``, channel ``2i + 1`` the y offset.
    """

    offsets: np.ndarray
    mask: np.ndarray


def assign_regions(
    annotations: Sequence[InstanceAnnotation], geom: GridGeometry, gamma: float = DEFAULT_GAMMA
) -> RegionAssignment:
    """Assign every cell within ``gamma`` of an instance center to that instance.

    Overlaps go to the nearest center, then to the smaller area, then to the
    lower index.
    """
    if not gamma > 0:
        raise ValueError("gamma must be > 0")
    index = np.full(geom.shape, NONE, dtype=np.int64)
    if not annotations:
        return RegionAssignment(index, float(gamma))
    ys, xs = np.mgrid[0:geom.height, 0:geom.width].astype(np.float64)
    centers = np.array([a.center for a in annotations], dtype=np.float64)
    dist = np.sqrt((xs[None] - centers[:, 0, None, None]) ** 2 + (ys[None] - centers[:, 1, None, None]) ** 2)
    inside = dist < gamma
    areas = np.array([a.area for a in annotations], dtype=np.float64)
    n = len(annotations)
    # rank instances per cell: distance, then area, then index; out-of-region last
    key_dist = np.where(inside, dist, np.inf)
    best = np.full(geom.shape, NONE, dtype=np.int64)
    best_d = np.full(geom.shape, np.inf)
    best_a = np.full(geom.shape, np.inf)
    for j in range(n):
        d = key_dist[j]
        better = (d < best_d) | ((d == best_d) & (areas[j] < best_a))
        better &= np.isfinite(d)
        best = np.where(better, j, best)
        best_d = np.where(better, d, best_d)
        best_a = np.where(better, areas[j], best_a)
    index[:] = best
    return RegionAssignment(index, float(gamma))


def build_weight_map(assignment: RegionAssignment) -> np.ndarray:
    return np.where(assignment.index != NONE, FOREGROUND_WEIGHT, BACKGROUND_WEIGHT)


def build_offset_target(
    annotations: Sequence[InstanceAnnotation], assignment: RegionAssignment, geom: GridGeometry
) -> OffsetTarget:
    if assignment.shape != geom.shape:
        raise ShapeMismatch(f"assignment {assignment.shape} does not match grid {geom.shape}")
    num_kp = annotations[0].pose.num_keypoints if annotations else 0
    offsets = np.zeros((2 * num_kp, geom.height, geom.width))
    mask = np.zeros(offsets.shape, dtype=bool)
    if not annotations:
        return OffsetTarget(offsets, mask)
    ys, xs = np.mgrid[0:geom.height, 0:geom.width].astype(np.float64)
    for n, ann in enumerate(annotations):
        region = assignment.index == n
        if not region.any():
            continue
        for i in range(num_kp):
            kx, ky = ann.pose.xy[i]
            offsets[2 * i][region] = xs[region] - kx
            offsets[2 * i + 1][region] = ys[region] - ky
            if ann.pose.visibility[i] > 0:
                mask[2 * i][region] = True
                mask[2 * i + 1][region] = True
    return OffsetTarget(offsets, mask)


PoseProvider = Union[Callable[[int, int], Pose], np.ndarray]


def _predicted_xy_at(predicted: PoseProvider, cells: np.ndarray, num_kp: int) -> np.ndarray:
    if callable(predicted):
        out = np.empty((len(cells), num_kp, 2))
        for m, (x, y) in enumerate(cells):
            out[m] = predicted(int(x), int(y)).xy
        return out
    arr = np.asarray(predicted, dtype=np.float64)
    return arr[cells[:, 1], cells[:, 0]]


def cir_values(pred_xy, cells, annotations, assignment, kc: FalloffConstants) -> np.ndarray:
    """OKS of each assigned cell's predicted pose against its instance.

    ``pred_xy`` is ``(M, K, 2)`` aligned with ``cells`` (``(M, 2)`` integer x, y).
    """
    owner = assignment.index[cells[:, 1], cells[:, 0]]
    if np.any(owner == NONE):
        raise ValueError("cir_values called on unassigned cells")
    gt_xy = np.stack([a.pose.xy for a in annotations])[owner]
    gt_vis = np.stack([a.pose.visibility for a in annotations])[owner]
    scales = np.array([a.scale for a in annotations])[owner]
    if np.any(gt_vis.max(axis=1) <= 0):
        raise NoVisibleKeypoints("instance without visible keypoints in CIR target")
    return np.clip(oks_arrays(pred_xy, gt_xy, gt_vis, scales, kc.k), 0.0, 1.0)


def build_cir_target(
    predicted_poses: PoseProvider,
    annotations: Sequence[InstanceAnnotation],
    assignment: RegionAssignment,
    kc: FalloffConstants,
) -> np.ndarray:
    """Score-map target: OKS of the pose predicted at each region cell, 0 elsewhere.

    ``predicted_poses`` is either a callable ``(x, y) -> Pose`` or an
    ``(H, W, K, 2)`` array of predicted keypoint positions. The result is a
    plain array, so nothing downstream can differentiate through it.
    """
    target = np.zeros(assignment.shape)
    cells = assignment.assigned_cells()
    if len(cells) == 0:
        return target
    num_kp = annotations[0].pose.num_keypoints
    pred_xy = _predicted_xy_at(predicted_poses, cells, num_kp)
    target[cells[:, 1], cells[:, 0]] = cir_values(pred_xy, cells, annotations, assignment, kc)
    return target


def discrete_label(assignment: RegionAssignment) -> np.ndarray:
    """Baseline {1, 0} instance label: 1 on every region cell."""
    return (assignment.index != NONE).astype(np.float64)


def gaussian_label(
    annotations: Sequence[InstanceAnnotation], assignment: RegionAssignment, sigma: float | None = None
) -> np.ndarray:
    """Baseline Gaussian instance label centred on each instance, restricted to its region.

    ``sigma`` defaults to half the region radius.
    """
    sigma = assignment.gamma / 2.0 if sigma is None else sigma
    out = np.zeros(assignment.shape)
    cells = assignment.assigned_cells()
    if len(cells) == 0:
        return out
    owner = assignment.index[cells[:, 1], cells[:, 0]]
    centers = np.array([a.center for a in annotations])[owner]
    d2 = ((cells - centers) ** 2).sum(axis=1)
    out[cells[:, 1], cells[:, 0]] = np.exp(-d2 / (2.0 * sigma * sigma))
    return out


def ideal_prediction(
    annotations: Sequence[InstanceAnnotation], geom: GridGeometry, gamma: float = DEFAULT_GAMMA
) -> tuple[np.ndarray, np.ndarray]:
    """Score map and offset field a perfect network would emit.

    Offsets are exact on every region cell, so the CIR target there is 1;
    the score is tapered by the Gaussian center label so each instance has a
    single strict peak for the decoder to find.
    """
    assignment = assign_regions(annotations, geom, gamma)
    target = build_offset_target(annotations, assignment, geom)
    if annotations:
        xs = np.arange(geom.width, dtype=np.float64)
        ys = np.arange(geom.height, dtype=np.float64)
        cell_xy = np.stack(np.meshgrid(xs, ys), axis=-1)
        k = annotations[0].pose.num_keypoints
        pred = cell_xy[:, :, None, :] - target.offsets.reshape(k, 2, geom.height, geom.width).transpose(2, 3, 0, 1)
        # invisible keypoints carry no offset target; their OKS terms are masked anyway
        kc = FalloffConstants.uniform(k)
        cir = build_cir_target(pred, annotations, assignment, kc)
    else:
        cir = np.zeros(geom.shape)
    score = cir * gaussian_label(annotations, assignment)
    return score, target.offsets
