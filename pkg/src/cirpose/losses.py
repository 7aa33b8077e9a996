"""Score-map and offset losses with their gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ShapeMismatch

SMOOTH_L1_BETA = 1.0


@dataclass
class LossValue:
    """A scalar loss and its gradient(s) w.r.t. the prediction(s) it was computed from.

    ``grad`` has the prediction's shape. Combined losses keep the per-term
    gradients in ``grads`` keyed by term name.
    """

    value: float
    grad: np.ndarray | None = None
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _same_shape(*arrays):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeMismatch(f"shape mismatch: {sorted(shapes)}")


def weighted_l2(pred, target, w) -> LossValue:
    """``mean(w * (pred - target)^2)`` over all cells."""
    pred, target, w = (np.asarray(a, dtype=np.float64) for a in (pred, target, w))
    _same_shape(pred, target, w)
    count = pred.size
    if count == 0:
        return LossValue(0.0, np.zeros_like(pred))
    r = pred - target
    value = float(np.sum(w * r * r) / count)
    return LossValue(value, 2.0 * w * r / count)


def smooth_l1(pred, target, mask, beta: float = SMOOTH_L1_BETA) -> LossValue:
    """Smooth-L1 over masked elements, averaged by the number of masked elements.

    An empty mask gives loss 0 and a zero gradient.
    """
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _same_shape(pred, target, mask)
    count = int(mask.sum())
    if count == 0:
        return LossValue(0.0, np.zeros_like(pred))
    r = np.where(mask, pred - target, 0.0)
    a = np.abs(r)
    quad = a < beta
    per = np.where(quad, 0.5 * r * r / beta, a - 0.5 * beta)
    grad = np.where(quad, r / beta, np.sign(r)) / count
    return LossValue(float(per[mask].sum() / count), np.where(mask, grad, 0.0))


def total_loss(l_i: LossValue, l_d: LossValue, lambda_i: float = 1.0, lambda_d: float = 1.0) -> LossValue:
    if lambda_i < 0 or lambda_d < 0:
        raise ValueError("loss weights must be >= 0")
    grads = {}
    if l_i.grad is not None:
        grads["score"] = lambda_i * l_i.grad
    if l_d.grad is not None:
        grads["offsets"] = lambda_d * l_d.grad
    return LossValue(lambda_i * l_i.value + lambda_d * l_d.value, None, grads)
