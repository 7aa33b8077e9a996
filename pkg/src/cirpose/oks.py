"""Object keypoint similarity."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import FalloffConstants, InstanceAnnotation, InvalidScale, NoVisibleKeypoints, Pose, ShapeMismatch


def keypoint_similarity(d, s, k):
    """Gaussian falloff ``exp(-d^2 / (2 s^2 k^2))`` for a single keypoint.

    Broadcasts over numpy inputs.
    """
    s = np.asarray(s, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if np.any(~(s > 0)) or np.any(~(k > 0)):
        raise InvalidScale("scale and falloff constant must be > 0")
    d = np.asarray(d, dtype=np.float64)
    out = np.exp(-(d * d) / (2.0 * s * s * k * k))
    return float(out) if out.ndim == 0 else out


def oks_arrays(pred_xy, gt_xy, gt_visibility, scale, k) -> np.ndarray:
    """Vectorised OKS over leading batch dimensions.

    ``pred_xy`` and ``gt_xy`` are ``(..., K, 2)``, ``gt_visibility`` is
    ``(..., K)``, ``scale`` broadcasts against the batch shape and ``k`` is
    ``(K,)``. Entries whose ground truth has no visible keypoint come back
    as NaN.
    """
    pred_xy = np.asarray(pred_xy, dtype=np.float64)
    gt_xy = np.asarray(gt_xy, dtype=np.float64)
    vis = np.asarray(gt_visibility) > 0
    scale = np.asarray(scale, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    diff = pred_xy - gt_xy
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2
    e = np.exp(-d2 / (2.0 * (scale[..., None] ** 2) * (k * k)))
    n = vis.sum(axis=-1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(vis, e, 0.0).sum(axis=-1) / n


def oks(pred: Pose, gt: InstanceAnnotation, kc: FalloffConstants) -> float:
    """OKS of a predicted pose against one annotated instance.

    Keypoints with visibility 1 or 2 both enter the mean; unlabeled ones are
    skipped in numerator and denominator alike.
    """
    k = pred.num_keypoints
    if gt.pose.num_keypoints != k or len(kc) != k:
        raise ShapeMismatch(
            f"pred has {k} keypoints, gt {gt.pose.num_keypoints}, falloff {len(kc)}"
        )
    if not np.any(gt.pose.visible_mask()):
        raise NoVisibleKeypoints("gt has no visible keypoints")
    if not gt.scale > 0:
        raise InvalidScale("instance scale must be > 0")
    value = oks_arrays(pred.xy, gt.pose.xy, gt.pose.visibility, gt.scale, kc.k)
    return float(min(max(value, 0.0), 1.0))


def pairwise_oks(
    preds: Sequence[Pose], gts: Sequence[InstanceAnnotation], kc: FalloffConstants
) -> np.ndarray:
    """``(len(preds), len(gts))`` matrix of OKS values; undefined entries are NaN."""
    out = np.full((len(preds), len(gts)), np.nan)
    if not preds or not gts:
        return out
    pxy = np.stack([p.xy for p in preds])
    gxy = np.stack([g.pose.xy for g in gts])
    gvis = np.stack([g.pose.visibility for g in gts])
    if pxy.shape[1:] != gxy.shape[1:] or pxy.shape[1] != len(kc):
        raise ShapeMismatch("all poses and the falloff constants must share K")
    scales = np.array([g.scale for g in gts], dtype=np.float64)
    out = oks_arrays(pxy[:, None], gxy[None], gvis[None], scales[None], kc.k)
    return np.clip(out, 0.0, 1.0)
