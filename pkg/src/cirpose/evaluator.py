"""COCO-convention keypoint metrics.

AP is 101-point interpolated, averaged over OKS thresholds 0.50:0.05:0.95,
with at most 20 detections per image. Size bands use ground-truth pixel
area: medium is ``[32^2, 96^2)``, large ``>= 96^2``. Ground truths outside
the evaluated band are ignored: detections matched to them do not count,
and neither do unmatched detections whose own area falls outside the band.
Undefined metrics (no ground truth in scope) are reported as -1.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import FalloffConstants, InstanceAnnotation, Pose
from .oks import pairwise_oks

OKS_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
# i / 100 is the double nearest each decimal recall level (linspace is an ulp off at ten of them)
RECALL_POINTS = np.arange(101) / 100.0
MAX_DETECTIONS = 20
AREA_ALL = (0.0, np.inf)
AREA_MEDIUM = (32.0 ** 2, 96.0 ** 2)
AREA_LARGE = (96.0 ** 2, np.inf)
UNDEFINED = -1.0


class UnknownImageId(KeyError):
    pass


@dataclass
class ImageMatches:
    """Greedy matching of one image at one threshold.

    ``det_gt[d]`` is the matched gt index or -1; detections are listed in
    descending score order (``det_order`` maps back to the input order).
    """

    det_order: np.ndarray
    det_scores: np.ndarray
    det_gt: np.ndarray
    det_ignore: np.ndarray
    gt_ignore: np.ndarray


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float
    ar: float
    thresholds: np.ndarray = field(default_factory=lambda: OKS_THRESHOLDS.copy())
    precision: np.ndarray | None = None  # (T, 101) interpolated precision, all areas
    recall: np.ndarray | None = None  # (T,) final recall, all areas

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("ap", "ap50", "ap75", "ap_m", "ap_l", "ar")}


def pose_area(xy: np.ndarray, stride: float = 1.0) -> float:
    """Keypoint bounding-box area in image pixels (the area COCO assigns a keypoint result)."""
    span = (xy.max(axis=0) - xy.min(axis=0)) * stride
    return float(span[0] * span[1])


def _in_range(area, rng):
    return rng[0] <= area < rng[1]


def match_detections(
    dets: Sequence[Pose],
    gts: Sequence[InstanceAnnotation],
    threshold: float,
    kc: FalloffConstants,
    area_range=AREA_ALL,
    max_dets: int | None = MAX_DETECTIONS,
    stride: float = 1.0,
    ious: np.ndarray | None = None,
) -> ImageMatches:
    """Greedy one-to-one matching in descending score order.

    Each detection takes the unmatched in-band gt with the highest OKS
    (ties: lower index) if that OKS reaches ``threshold``; failing that, an
    unmatched out-of-band gt by the same rule, which marks the detection
    ignored.
    """
    scores = np.array([p.score for p in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    if max_dets is not None:
        order = order[:max_dets]
    gt_ignore = np.array([not _in_range(g.area, area_range) for g in gts], dtype=bool)
    if ious is None:
        ious = pairwise_oks(list(dets), list(gts), kc)
    det_gt = np.full(len(order), -1, dtype=np.int64)
    det_ignore = np.zeros(len(order), dtype=bool)
    taken = np.zeros(len(gts), dtype=bool)
    for r, d in enumerate(order):
        for want_ignored in (False, True):
            cand = ~taken & (gt_ignore == want_ignored)
            if not cand.any():
                continue
            vals = np.where(cand, ious[d], -np.inf)
            vals = np.where(np.isnan(vals), -np.inf, vals)
            g = int(np.argmax(vals))
            if vals[g] >= threshold:
                det_gt[r] = g
                taken[g] = True
                det_ignore[r] = want_ignored
                break
        if det_gt[r] == -1 and not _in_range(pose_area(dets[d].xy, stride), area_range):
            det_ignore[r] = True
    return ImageMatches(order, scores[order], det_gt, det_ignore, gt_ignore)


def average_precision(scores, is_tp, num_gt: int, ignore=None) -> tuple[float, np.ndarray, float]:
    """101-point interpolated AP over detections pooled across a dataset.

    Returns ``(ap, interpolated_precision, final_recall)``; with no
    ground truth the result is undefined (-1 and NaNs).
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_tp = np.asarray(is_tp, dtype=bool)
    ignore = np.zeros_like(is_tp) if ignore is None else np.asarray(ignore, dtype=bool)
    if num_gt <= 0:
        return UNDEFINED, np.full(RECALL_POINTS.shape, np.nan), UNDEFINED
    order = np.argsort(-scores, kind="stable")
    keep = ~ignore[order]
    tp = is_tp[order][keep]
    tps = np.cumsum(tp).astype(np.float64)
    fps = np.cumsum(~tp).astype(np.float64)
    q = np.zeros(RECALL_POINTS.shape)
    if tp.size == 0:
        return 0.0, q, 0.0
    rc = tps / num_gt
    pr = tps / (tps + fps)
    # precision envelope: running max from the right
    pr = np.maximum.accumulate(pr[::-1])[::-1]
    idx = np.searchsorted(rc, RECALL_POINTS, side="left")
    valid = idx < pr.size
    q[valid] = pr[idx[valid]]
    return float(q.mean()), q, float(rc[-1])


def _check_ids(dets: Mapping, gts: Mapping):
    unknown = sorted(set(dets) - set(gts), key=str)
    if unknown:
        raise UnknownImageId(f"detections reference unknown image ids: {unknown}")


def evaluate_threshold(dets, gts, kc, threshold, area_range=AREA_ALL, stride=1.0, ious=None):
    """Pool per-image matches at one threshold; returns (ap, precision curve, recall)."""
    all_scores, all_tp, all_ign = [], [], []
    num_gt = 0
    for img in gts:
        d = list(dets.get(img, []))
        g = list(gts[img])
        m = match_detections(d, g, threshold, kc, area_range, MAX_DETECTIONS, stride,
                             None if ious is None else ious[img])
        num_gt += int((~m.gt_ignore).sum())
        all_scores.append(m.det_scores)
        all_tp.append(m.det_gt >= 0)
        all_ign.append(m.det_ignore)
    if all_scores:
        scores, tp, ign = np.concatenate(all_scores), np.concatenate(all_tp), np.concatenate(all_ign)
    else:
        scores, tp, ign = np.zeros(0), np.zeros(0, bool), np.zeros(0, bool)
    return average_precision(scores, tp, num_gt, ign)


def _mean_defined(values):
    vals = [v for v in values if v != UNDEFINED]
    return float(np.mean(vals)) if vals else UNDEFINED


def summarize(
    dets: Mapping[object, Sequence[Pose]],
    gts: Mapping[object, Sequence[InstanceAnnotation]],
    kc: FalloffConstants,
    stride: float = 1.0,
) -> EvalResult:
    """AP/AR summary.

    ``dets`` and ``gts`` map image id to scored poses and annotations in grid
    units; ``stride`` converts detection extents to pixels for the size bands.
    Images present in ``gts`` but absent from ``dets`` have no detections.
    """
    _check_ids(dets, gts)
    ious = {}
    for img in gts:
        d = list(dets.get(img, []))
        ious[img] = pairwise_oks(d, list(gts[img]), kc)
    per_band = {}
    for name, rng in (("all", AREA_ALL), ("medium", AREA_MEDIUM), ("large", AREA_LARGE)):
        per_band[name] = [evaluate_threshold(dets, gts, kc, t, rng, stride, ious) for t in OKS_THRESHOLDS]
    allr = per_band["all"]
    aps = [r[0] for r in allr]
    return EvalResult(
        ap=_mean_defined(aps),
        ap50=aps[0],
        ap75=aps[5],
        ap_m=_mean_defined([r[0] for r in per_band["medium"]]),
        ap_l=_mean_defined([r[0] for r in per_band["large"]]),
        ar=_mean_defined([r[2] for r in allr]),
        precision=np.stack([r[1] for r in allr]),
        recall=np.array([r[2] for r in allr]),
    )
