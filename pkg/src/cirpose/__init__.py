"""Multi-person pose estimation building blocks: OKS, consistent instance
score targets, query-encoding ops, losses, a desk-scale trainer, decoding,
COCO-style evaluation and file formats."""

from .core import (
    COCO_KEYPOINT_NAMES,
    COCO_SIGMAS,
    FalloffConstants,
    GridGeometry,
    InstanceAnnotation,
    InvalidScale,
    Keypoint,
    NonPositiveArea,
    NoVisibleKeypoints,
    Pose,
    PoseError,
    ShapeMismatch,
    Visibility,
    from_grid,
    instance_center,
    instance_scale,
    to_grid,
)
from .decoder import Candidate, decode, extract_candidates, oks_nms
from .evaluator import EvalResult, UnknownImageId, average_precision, match_detections, summarize
from .losses import LossValue, smooth_l1, total_loss, weighted_l2
from .oks import keypoint_similarity, oks, pairwise_oks
from .qem import (
    KqeOutput,
    KqeParams,
    TapeMismatch,
    bilinear_sample,
    kqe_forward,
    pqe_forward,
    qem_backward,
)
from .targets import (
    OffsetTarget,
    RegionAssignment,
    assign_regions,
    build_cir_target,
    build_offset_target,
    build_weight_map,
)

__version__ = "0.1.0"

__all__ = [
    "COCO_KEYPOINT_NAMES",
    "COCO_SIGMAS",
    "Candidate",
    "EvalResult",
    "FalloffConstants",
    "GridGeometry",
    "InstanceAnnotation",
    "InvalidScale",
    "Keypoint",
    "KqeOutput",
    "KqeParams",
    "LossValue",
    "NoVisibleKeypoints",
    "NonPositiveArea",
    "OffsetTarget",
    "Pose",
    "PoseError",
    "RegionAssignment",
    "ShapeMismatch",
    "TapeMismatch",
    "UnknownImageId",
    "Visibility",
    "assign_regions",
    "average_precision",
    "bilinear_sample",
    "build_cir_target",
    "build_offset_target",
    "build_weight_map",
    "decode",
    "extract_candidates",
    "from_grid",
    "instance_center",
    "instance_scale",
    "keypoint_similarity",
    "kqe_forward",
    "match_detections",
    "oks",
    "oks_nms",
    "pairwise_oks",
    "pqe_forward",
    "qem_backward",
    "smooth_l1",
    "summarize",
    "to_grid",
    "total_loss",
    "weighted_l2",
]
