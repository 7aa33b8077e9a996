"""Differentiable sampling and the keypoint/pose query encoders.

Each forward op returns its result together with a tape that holds what the
reverse pass needs. ``qem_backward(tape, ...)`` (or ``tape.backward(...)``)
returns vector-Jacobian products for every grid, point and head parameter
that fed the forward pass.

Grids are ``(C, H, W)`` arrays; points are ``(M, 2)`` arrays of ``(x, y)``.
Sampling clamps points to ``[0, W-1] x [0, H-1]`` first, so it is defined
everywhere; the positional derivative is zero along a clamped axis.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .core import ShapeMismatch


class TapeMismatch(ValueError):
    pass


def _check_cotangent(name, value, shape):
    if value is None:
        return np.zeros(shape)
    value = np.asarray(value, dtype=np.float64)
    if value.shape != tuple(shape):
        raise TapeMismatch(f"cotangent {name} has shape {value.shape}, expected {tuple(shape)}")
    return value


# ---------------------------------------------------------------------------
# bilinear sampling


@dataclass
class BilinearTape:
    grid_shape: tuple[int, int, int]
    corners: np.ndarray  # (4, M) flat cell indices
    weights: np.ndarray  # (4, M)
    dvdx: np.ndarray  # (M, C)
    dvdy: np.ndarray  # (M, C)
    clamped: np.ndarray  # (M, 2) bool, per axis
    squeeze: bool

    def patch_signature(self) -> np.ndarray:
        """Which bilinear patch (and clamp state) each sample used; equal signatures mean the
        samples stayed inside the same smooth piece."""
        return np.concatenate([self.corners[0], self.clamped.ravel().astype(np.int64)])

    def backward(self, cotangent):
        """Return ``(d_grid, d_points)`` for an output cotangent of shape ``(M, C)``."""
        c, h, w = self.grid_shape
        m = self.weights.shape[1]
        cot = _check_cotangent("values", np.atleast_2d(cotangent) if self.squeeze else cotangent, (m, c))
        d_points = np.stack([(cot * self.dvdx).sum(axis=1), (cot * self.dvdy).sum(axis=1)], axis=1)
        # scatter-add into the four corners of every sample
        idx = self.corners.ravel()
        d_grid = np.empty((c, h * w))
        for ch in range(c):
            d_grid[ch] = np.bincount(idx, weights=(self.weights * cot[:, ch]).ravel(), minlength=h * w)
        d_grid = d_grid.reshape(c, h, w)
        if self.squeeze:
            d_points = d_points[0]
        return d_grid, d_points


def bilinear_sample_with_tape(grid, points):
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 3 or min(grid.shape) < 1:
        raise ShapeMismatch(f"grid must be (C, H, W) with positive sizes, got {grid.shape}")
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = pts.reshape(-1, 2)
    c, h, w = grid.shape
    # non-finite points read cell (0, 0) and are then poisoned with NaN so failures surface downstream
    bad = ~np.isfinite(pts).all(axis=1)
    if bad.any():
        pts = np.where(bad[:, None], 0.0, pts)
    px, py = pts[:, 0], pts[:, 1]
    x = np.clip(px, 0.0, w - 1)
    y = np.clip(py, 0.0, h - 1)
    x0 = np.minimum(np.floor(x), max(w - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(h - 2, 0)).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0

    rows = np.ascontiguousarray(grid.reshape(c, h * w).T)
    i00, i01, i10, i11 = y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1
    g00, g01, g10, g11 = rows[i00], rows[i01], rows[i10], rows[i11]
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    if bad.any():
        for arr in (w00, w01, w10, w11):
            arr[bad] = np.nan
    values = w00[:, None] * g00 + w01[:, None] * g01 + w10[:, None] * g10 + w11[:, None] * g11

    clamped = np.stack([(px < 0) | (px > w - 1), (py < 0) | (py > h - 1)], axis=1)
    in_x = (~clamped[:, 0]).astype(np.float64)[:, None]
    in_y = (~clamped[:, 1]).astype(np.float64)[:, None]
    dvdx = in_x * ((1 - fy)[:, None] * (g01 - g00) + fy[:, None] * (g11 - g10))
    dvdy = in_y * ((1 - fx)[:, None] * (g10 - g00) + fx[:, None] * (g11 - g01))

    tape = BilinearTape(
        grid_shape=(c, h, w),
        corners=np.stack([i00, i01, i10, i11]),
        weights=np.stack([w00, w01, w10, w11]),
        dvdx=dvdx,
        dvdy=dvdy,
        clamped=clamped,
        squeeze=squeeze,
    )
    return (values[0] if squeeze else values), tape


def bilinear_sample(grid, points) -> np.ndarray:
    """Sample a ``(C, H, W)`` grid at ``(x, y)`` point(s) with border clamping.

    A single ``(2,)`` point gives a ``(C,)`` vector, ``(M, 2)`` points give ``(M, C)``.
    """
    return bilinear_sample_with_tape(grid, points)[0]


# ---------------------------------------------------------------------------
# keypoint query encoding


@dataclass
class KqeParams:
    """Three 1x1 linear heads of one keypoint branch.

    ``query_*`` maps a feature to the center-to-query displacement,
    ``semantic_*`` maps the query feature to ``N`` query-to-semantic-point
    displacements (interleaved ``x0, y0, x1, y1, ...``), and ``refine_*``
    maps the aggregated feature to the query-to-keypoint displacement.
    """

    query_w: np.ndarray  # (2, C)
    query_b: np.ndarray  # (2,)
    semantic_w: np.ndarray  # (2N, C)
    semantic_b: np.ndarray  # (2N,)
    refine_w: np.ndarray  # (2, C)
    refine_b: np.ndarray  # (2,)

    @property
    def channels(self) -> int:
        return self.query_w.shape[1]

    @property
    def num_semantic(self) -> int:
        return self.semantic_b.shape[0] // 2

    @classmethod
    def zeros(cls, channels: int, num_semantic: int = 9) -> KqeParams:
        if num_semantic < 0:
            raise ValueError("num_semantic must be >= 0")
        return cls(
            np.zeros((2, channels)), np.zeros(2),
            np.zeros((2 * num_semantic, channels)), np.zeros(2 * num_semantic),
            np.zeros((2, channels)), np.zeros(2),
        )

    def validate(self):
        c = self.channels
        n2 = self.semantic_b.shape[0]
        expected = {
            "query_w": (2, c), "query_b": (2,), "semantic_w": (n2, c),
            "semantic_b": (n2,), "refine_w": (2, c), "refine_b": (2,),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if n2 % 2:
            raise ShapeMismatch("semantic head must have an even number of outputs")

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass
class KqeOutput:
    query_displacement: np.ndarray  # (M, 2) center -> query
    query_position: np.ndarray  # (M, 2)
    semantic_offsets: np.ndarray  # (M, N, 2) query -> semantic points
    refine_displacement: np.ndarray  # (M, 2) query -> keypoint
    total_offset: np.ndarray  # (M, 2) center -> keypoint
    transformed_feature: np.ndarray  # (M, C)


@dataclass
class KqeTape:
    params: KqeParams
    center_tape: BilinearTape
    query_tape: BilinearTape
    semantic_tape: BilinearTape
    f_center: np.ndarray
    f_query: np.ndarray
    transformed: np.ndarray
    num_points: int
    squeeze: bool

    def backward(self, d_total_offset=None, d_query_position=None, d_transformed=None):
        """VJP of ``kqe_forward``.

        Returns a dict with ``rk`` (grid), ``centers`` and one entry per
        ``KqeParams`` field.
        """
        p = self.params
        m, c, n = self.num_points, p.channels, p.num_semantic
        sq = (lambda v: None if v is None else np.atleast_2d(v)) if self.squeeze else (lambda v: v)
        d_total = _check_cotangent("total_offset", sq(d_total_offset), (m, 2))
        d_qpos = _check_cotangent("query_position", sq(d_query_position), (m, 2))
        d_rprime = _check_cotangent("transformed_feature", sq(d_transformed), (m, c))

        d_dqk = d_total
        d_refine_w = d_dqk.T @ self.transformed
        d_refine_b = d_dqk.sum(axis=0)
        d_rprime = d_rprime + d_dqk @ p.refine_w

        # every semantic sample receives the full cotangent of the sum
        d_fp = np.repeat(d_rprime, n, axis=0)
        d_rk, d_pts = self.semantic_tape.backward(d_fp)
        d_pts = d_pts.reshape(m, n, 2)
        d_q = d_qpos + d_pts.sum(axis=1)
        d_sem = d_pts.reshape(m, 2 * n)
        d_semantic_w = d_sem.T @ self.f_query
        d_semantic_b = d_sem.sum(axis=0)
        d_fq = d_sem @ p.semantic_w
        g, dq2 = self.query_tape.backward(d_fq)
        d_rk += g
        d_q = d_q + dq2

        # q = c + D_cq, and the total offset also carries D_cq directly
        d_dcq = d_total + d_q
        d_centers = d_q.copy()
        d_query_w = d_dcq.T @ self.f_center
        d_query_b = d_dcq.sum(axis=0)
        g, dc = self.center_tape.backward(d_dcq @ p.query_w)
        d_rk += g
        d_centers += dc
        if self.squeeze:
            d_centers = d_centers[0]
        return {
            "rk": d_rk, "centers": d_centers,
            "query_w": d_query_w, "query_b": d_query_b,
            "semantic_w": d_semantic_w, "semantic_b": d_semantic_b,
            "refine_w": d_refine_w, "refine_b": d_refine_b,
        }


def kqe_query(rk, centers, params: KqeParams):
    """Step one only: center-to-query displacement ``(M, 2)`` and its sampling tape."""
    f_c, tape = bilinear_sample_with_tape(rk, np.asarray(centers, dtype=np.float64).reshape(-1, 2))
    return f_c @ params.query_w.T + params.query_b, f_c, tape


def kqe_forward_with_tape(rk, centers, params: KqeParams):
    rk = np.asarray(rk, dtype=np.float64)
    params.validate()
    if rk.ndim != 3 or rk.shape[0] != params.channels:
        raise ShapeMismatch(f"feature grid {rk.shape} does not feed heads with {params.channels} inputs")
    c_arr = np.asarray(centers, dtype=np.float64)
    squeeze = c_arr.ndim == 1
    c_arr = c_arr.reshape(-1, 2)
    m, n = c_arr.shape[0], params.num_semantic

    d_cq, f_c, center_tape = kqe_query(rk, c_arr, params)
    q = c_arr + d_cq
    f_q, query_tape = bilinear_sample_with_tape(rk, q)
    sem = (f_q @ params.semantic_w.T + params.semantic_b).reshape(m, n, 2)
    pts = q[:, None, :] + sem
    f_p, semantic_tape = bilinear_sample_with_tape(rk, pts.reshape(-1, 2))
    transformed = f_p.reshape(m, n, rk.shape[0]).sum(axis=1)
    d_qk = transformed @ params.refine_w.T + params.refine_b
    total = d_cq + d_qk

    out = KqeOutput(d_cq, q, sem, d_qk, total, transformed)
    if squeeze:
        out = KqeOutput(*(getattr(out, f.name)[0] for f in fields(KqeOutput)))
    tape = KqeTape(params, center_tape, query_tape, semantic_tape, f_c, f_q, transformed, m, squeeze)
    return out, tape


def kqe_forward(rk, centers, params: KqeParams) -> KqeOutput:
    """Keypoint query encoding at one ``(2,)`` or many ``(M, 2)`` positions.

    1. ``D_cq = query_head(rk(c))`` locates the query ``q = c + D_cq``.
    2. ``N`` semantic offsets come from ``semantic_head(rk(q))``; the
       transformed feature is the plain sum of ``rk`` sampled at ``q + offset_n``.
    3. ``D_qk = refine_head(transformed)`` and ``total_offset = D_cq + D_qk``.
    """
    return kqe_forward_with_tape(rk, centers, params)[0]


# ---------------------------------------------------------------------------
# pose query encoding


@dataclass
class PqeTape:
    sample_tape: BilinearTape
    num_points: int
    num_keypoints: int
    channels: int
    squeeze: bool

    def backward(self, cotangent):
        """Return ``(d_ri, d_centers, d_displacements)``."""
        m, k, c = self.num_points, self.num_keypoints, self.channels
        cot = np.atleast_2d(cotangent) if self.squeeze else cotangent
        cot = _check_cotangent("pose_feature", cot, (m, k * c))
        d_ri, d_pts = self.sample_tape.backward(cot.reshape(m * k, c))
        d_disp = d_pts.reshape(m, k, 2)
        d_centers = d_disp.sum(axis=1)
        if self.squeeze:
            return d_ri, d_centers[0], d_disp[0]
        return d_ri, d_centers, d_disp


def pqe_forward_with_tape(ri, centers, query_displacements):
    ri = np.asarray(ri, dtype=np.float64)
    c_arr = np.asarray(centers, dtype=np.float64)
    disp = np.asarray(query_displacements, dtype=np.float64)
    squeeze = c_arr.ndim == 1
    c_arr = c_arr.reshape(-1, 2)
    m = c_arr.shape[0]
    if squeeze:
        disp = disp[None]
    if disp.ndim != 3 or disp.shape[0] != m or disp.shape[2] != 2:
        raise ShapeMismatch(f"displacements {disp.shape} do not match {m} centers")
    if ri.ndim != 3:
        raise ShapeMismatch(f"instance grid must be (C, H, W), got {ri.shape}")
    k, ch = disp.shape[1], ri.shape[0]
    pts = c_arr[:, None, :] + disp
    vals, tape = bilinear_sample_with_tape(ri, pts.reshape(-1, 2))
    out = vals.reshape(m, k * ch)
    return (out[0] if squeeze else out), PqeTape(tape, m, k, ch, squeeze)


def pqe_forward(ri, centers, query_displacements) -> np.ndarray:
    """Concatenate ``ri`` sampled at every keypoint query, in keypoint order.

    ``centers`` is ``(2,)`` with ``(K, 2)`` displacements (gives ``(C*K,)``) or
    ``(M, 2)`` with ``(M, K, 2)`` displacements (gives ``(M, C*K)``).
    """
    return pqe_forward_with_tape(ri, centers, query_displacements)[0]


def qem_backward(tape, *cotangents, **named):
    """Dispatch a reverse pass for any tape produced in this module."""
    if not isinstance(tape, (BilinearTape, KqeTape, PqeTape)):
        raise TapeMismatch(f"not a recorded forward evaluation: {type(tape).__name__}")
    return tape.backward(*cotangents, **named)
