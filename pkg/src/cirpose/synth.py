"""Seeded synthetic scenes: stick figures rendered as per-keypoint Gaussian blobs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FalloffConstants, GridGeometry, InstanceAnnotation, Pose

# head, left hand, right hand, left foot, right foot; unit figure height
TOY_TEMPLATE = np.array([
    [0.00, -0.42],
    [-0.38, 0.00],
    [0.38, 0.00],
    [-0.20, 0.48],
    [0.20, 0.48],
])
TOY_KEYPOINT_NAMES = ("head", "left_hand", "right_hand", "left_foot", "right_foot")
# twice the COCO sigmas of nose, wrists and ankles
TOY_FALLOFF = (0.052, 0.124, 0.124, 0.178, 0.178)

BLOB_SIGMA = 1.5
HEIGHT_RANGE = (10.0, 18.0)
JITTER = 0.05
MAX_TILT = np.deg2rad(10.0)
MIN_CENTER_DISTANCE = 10.0
MARGIN = 1.0


def toy_falloff() -> FalloffConstants:
    return FalloffConstants(TOY_FALLOFF)


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    input: np.ndarray  # (K, H, W)
    annotations: tuple[InstanceAnnotation, ...]
    seed: int
    geom: GridGeometry


def render_blobs(keypoints: np.ndarray, geom: GridGeometry, sigma: float = BLOB_SIGMA) -> np.ndarray:
    """Sum of unit-height Gaussians; ``keypoints`` is ``(num_instances, K, 2)``."""
    k = keypoints.shape[1] if keypoints.ndim == 3 else TOY_TEMPLATE.shape[0]
    out = np.zeros((k, geom.height, geom.width))
    if keypoints.size == 0:
        return out
    ys = np.arange(geom.height, dtype=np.float64)[:, None]
    xs = np.arange(geom.width, dtype=np.float64)[None, :]
    for inst in keypoints:
        for i, (kx, ky) in enumerate(inst):
            out[i] += np.exp(-((xs - kx) ** 2 + (ys - ky) ** 2) / (2.0 * sigma * sigma))
    return out


def _figure(rng, height):
    tilt = rng.uniform(-MAX_TILT, MAX_TILT)
    rot = np.array([[np.cos(tilt), -np.sin(tilt)], [np.sin(tilt), np.cos(tilt)]])
    pts = TOY_TEMPLATE + rng.normal(0.0, JITTER, TOY_TEMPLATE.shape)
    return (pts @ rot.T) * height


def synth_scene(seed: int, geom: GridGeometry = GridGeometry(64, 64), num_instances: int | None = None) -> SyntheticScene:
    """Place ``num_instances`` stick figures (1-4 at random when ``None``).

    Figures that cannot be placed inside the grid without crowding an
    earlier one are dropped after a bounded number of attempts.
    """
    rng = np.random.default_rng(seed)
    if num_instances is None:
        num_instances = int(rng.integers(1, 5))
    if num_instances < 0:
        raise ValueError("num_instances must be >= 0")
    figures = []
    for _ in range(num_instances):
        for _attempt in range(200):
            pts = _figure(rng, rng.uniform(*HEIGHT_RANGE))
            lo = MARGIN - pts.min(axis=0)
            hi = np.array([geom.width - 1, geom.height - 1]) - MARGIN - pts.max(axis=0)
            if np.any(hi < lo):
                continue
            pts = pts + rng.uniform(lo, hi)
            center = pts.mean(axis=0)
            if all(np.linalg.norm(center - f.mean(axis=0)) >= MIN_CENTER_DISTANCE for f in figures):
                figures.append(pts)
                break
    kps = np.array(figures).reshape(len(figures), TOY_TEMPLATE.shape[0], 2)
    anns = []
    for pts in kps:
        span = (pts.max(axis=0) - pts.min(axis=0)) * geom.stride
        pose = Pose(pts, np.full(pts.shape[0], 2))
        anns.append(InstanceAnnotation.from_pose(pose, float(span[0] * span[1]), geom.stride))
    return SyntheticScene(render_blobs(kps, geom), tuple(anns), seed, geom)
