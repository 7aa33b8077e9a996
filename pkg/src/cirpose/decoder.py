"""Inference-side decoding: score-map peaks to pose candidates, then OKS-NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .core import FalloffConstants, Pose
from .oks import oks_arrays

DEFAULT_SCORE_THRESHOLD = 0.01
DEFAULT_TOP_K = 30
DEFAULT_NMS_THRESHOLD = 0.7


@dataclass(frozen=True)
class Candidate:
    pose: Pose
    score: float
    source_cell: tuple[int, int]


OffsetsProvider = Union[np.ndarray, Callable[[int, int], np.ndarray]]


def local_maxima(score_map: np.ndarray) -> np.ndarray:
    """Boolean mask of cells strictly greater than each of their (up to 8) neighbours."""
    s = np.asarray(score_map, dtype=np.float64)
    h, w = s.shape
    padded = np.full((h + 2, w + 2), -np.inf)
    padded[1:-1, 1:-1] = s
    peak = np.ones((h, w), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            peak &= s > padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return peak


def _offsets_at(offsets: OffsetsProvider, x: int, y: int) -> np.ndarray:
    if callable(offsets):
        return np.asarray(offsets(x, y), dtype=np.float64).reshape(-1, 2)
    return np.asarray(offsets[:, y, x], dtype=np.float64).reshape(-1, 2)


def extract_candidates(
    score_map,
    offsets: OffsetsProvider,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
) -> list[Candidate]:
    """Turn strict 3x3 peaks at or above ``score_threshold`` into candidates.

    ``offsets`` is a ``(2K, H, W)`` field of cell-minus-keypoint offsets or a
    callable returning them for one cell. Candidates come back sorted by
    descending score (ties in row-major order) and truncated to ``top_k``.
    """
    if score_threshold < 0 or top_k < 0:
        raise ValueError("score_threshold and top_k must be >= 0")
    s = np.asarray(score_map, dtype=np.float64)
    ys, xs = np.nonzero(local_maxima(s) & (s >= score_threshold))
    scores = s[ys, xs]
    order = np.argsort(-scores, kind="stable")[:top_k]
    out = []
    for j in order:
        x, y = int(xs[j]), int(ys[j])
        score = float(scores[j])
        kp = np.array([x, y], dtype=np.float64) - _offsets_at(offsets, x, y)
        pose = Pose(kp, np.ones(kp.shape[0], dtype=np.int64), score)
        out.append(Candidate(pose, score, (x, y)))
    return out


def pose_extent_scale(xy: np.ndarray) -> float:
    """sqrt of the axis-aligned bounding-box area of a keypoint set (grid units)."""
    span = xy.max(axis=0) - xy.min(axis=0)
    return float(np.sqrt(span[0] * span[1]))


def _nms_scale(xy):
    # a degenerate (collinear) pose has no area; keep OKS defined with a tiny floor
    return max(pose_extent_scale(xy), 1e-6)


def candidate_oks(reference: Candidate, others: Sequence[Candidate], kc: FalloffConstants) -> np.ndarray:
    """OKS of each of ``others`` against ``reference`` treated as fully visible ground truth."""
    if not others:
        return np.zeros(0)
    ref = reference.pose.xy
    oxy = np.stack([c.pose.xy for c in others])
    vis = np.ones(ref.shape[0], dtype=np.int64)
    return oks_arrays(oxy, ref[None], vis[None], np.array(_nms_scale(ref)), kc.k)


def oks_nms(
    candidates: Sequence[Candidate],
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
    kc: FalloffConstants | None = None,
    max_detections: int | None = None,
) -> list[Candidate]:
    """Greedy OKS suppression.

    Repeatedly keeps the best remaining candidate and drops every other whose
    OKS against it exceeds ``nms_threshold``. ``max_detections`` caps the
    number kept (fixed-count retention for diagnostics).
    """
    if kc is None:
        raise ValueError("oks_nms needs falloff constants")
    order = sorted(range(len(candidates)), key=lambda i: -candidates[i].score)
    remaining = [candidates[i] for i in order]
    kept: list[Candidate] = []
    while remaining:
        if max_detections is not None and len(kept) >= max_detections:
            break
        best, rest = remaining[0], remaining[1:]
        kept.append(best)
        sim = candidate_oks(best, rest, kc)
        remaining = [c for c, v in zip(rest, sim) if not v > nms_threshold]
    return kept


def decode(
    score_map,
    offsets: OffsetsProvider,
    kc: FalloffConstants,
    score_threshold: float = DEFAULT_SCORE_THRESHOLD,
    top_k: int = DEFAULT_TOP_K,
    nms_threshold: float = DEFAULT_NMS_THRESHOLD,
) -> list[Candidate]:
    cands = extract_candidates(score_map, offsets, score_threshold, top_k)
    return oks_nms(cands, nms_threshold, kc)
