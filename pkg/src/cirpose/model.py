"""A tiny two-branch network built from the query-encoding operators.

Topology: three 3x3 conv + softplus layers (dilations 1, 2, 4) give the general
feature ``R_g``. Per-keypoint 1x1 heads give ``R_k`` and an instance 1x1 head
gives ``R_I``. Each keypoint branch runs KQE; PQE gathers ``R_I`` at the K
keypoint queries and a linear score head + sigmoid predicts the score map.

Offset heads are reparametrised with fixed gains (the stored parameter times
the gain is the effective head weight) so that displacements of several
cells are reachable at small learning rates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ShapeMismatch
from .qem import KqeParams, kqe_forward_with_tape, pqe_forward_with_tape

DILATIONS = (1, 2, 4)


@dataclass(frozen=True)
class ModelShape:
    num_keypoints: int = 5
    channels: int = 16
    keypoint_channels: int = 8
    instance_channels: int = 8
    num_semantic: int = 9
    query_gain: float = 16.0
    semantic_gain: float = 2.0
    refine_gain: float = 4.0


def _conv_cols(x, dilation):
    cin, h, w = x.shape
    d = dilation
    xp = np.pad(x, ((0, 0), (d, d), (d, d)))
    cols = np.empty((cin, 9, h, w))
    for ky in range(3):
        for kx in range(3):
            cols[:, ky * 3 + kx] = xp[:, ky * d:ky * d + h, kx * d:kx * d + w]
    return cols.reshape(cin * 9, h * w)


def conv3x3(x, weight, bias, dilation):
    """Same-padded 3x3 convolution of a ``(Cin, H, W)`` map; returns output and im2col buffer."""
    cout = weight.shape[0]
    _, h, w = x.shape
    cols = _conv_cols(x, dilation)
    out = weight.reshape(cout, -1) @ cols + bias[:, None]
    return out.reshape(cout, h, w), cols


def conv3x3_backward(d_out, cols, weight, x_shape, dilation):
    cout = weight.shape[0]
    cin, h, w = x_shape
    d = dilation
    d_flat = d_out.reshape(cout, h * w)
    d_w = (d_flat @ cols.T).reshape(weight.shape)
    d_b = d_flat.sum(axis=1)
    d_cols = (weight.reshape(cout, -1).T @ d_flat).reshape(cin, 9, h, w)
    d_xp = np.zeros((cin, h + 2 * d, w + 2 * d))
    for ky in range(3):
        for kx in range(3):
            d_xp[:, ky * d:ky * d + h, kx * d:kx * d + w] += d_cols[:, ky * 3 + kx]
    return d_xp[:, d:d + h, d:d + w], d_w, d_b


def _semantic_init(n):
    """Initial semantic offsets: a 3x3 lattice for N=9, a sunflower spiral otherwise.

    The lattice is rotated so initial sample points avoid cell boundaries,
    where bilinear sampling is not differentiable.
    """
    if n == 9:
        g = np.array([(x, y) for y in (-1, 0, 1) for x in (-1, 0, 1)], dtype=np.float64)
        a = 0.3
        return g @ np.array([[np.cos(a), np.sin(a)], [-np.sin(a), np.cos(a)]])
    idx = np.arange(n) + 0.5
    r = np.sqrt(idx / max(n, 1)) * 1.5
    theta = idx * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)


def init_params(shape: ModelShape, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    k, c, ck, ci, n = (shape.num_keypoints, shape.channels, shape.keypoint_channels,
                       shape.instance_channels, shape.num_semantic)

    def he(*dims, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), dims)

    p = {
        "conv1_w": he(c, k, 3, 3, fan_in=9 * k), "conv1_b": np.zeros(c),
        "conv2_w": he(c, c, 3, 3, fan_in=9 * c), "conv2_b": np.zeros(c),
        "conv3_w": he(c, c, 3, 3, fan_in=9 * c), "conv3_b": np.zeros(c),
        "kp_w": rng.normal(0.0, np.sqrt(1.0 / c), (k, ck, c)), "kp_b": np.zeros((k, ck)),
        "inst_w": rng.normal(0.0, np.sqrt(1.0 / c), (ci, c)), "inst_b": np.zeros(ci),
        "query_w": rng.normal(0.0, 1e-3, (k, 2, ck)), "query_b": rng.uniform(-0.5, 0.5, (k, 2)) / shape.query_gain,
        "semantic_w": rng.normal(0.0, 1e-3, (k, 2 * n, ck)),
        "semantic_b": np.tile(_semantic_init(n).reshape(-1) / shape.semantic_gain, (k, 1)),
        "refine_w": rng.normal(0.0, 1e-3, (k, 2, ck)), "refine_b": np.zeros((k, 2)),
        "score_w": rng.normal(0.0, 1e-2, ci * k), "score_b": np.array(-2.0),
    }
    return p


def kqe_params(params, shape: ModelShape, i: int) -> KqeParams:
    """Effective KQE heads of keypoint branch ``i`` (gains applied)."""
    return KqeParams(
        shape.query_gain * params["query_w"][i], shape.query_gain * params["query_b"][i],
        shape.semantic_gain * params["semantic_w"][i], shape.semantic_gain * params["semantic_b"][i],
        shape.refine_gain * params["refine_w"][i], shape.refine_gain * params["refine_b"][i],
    )


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(x):
    return np.logaddexp(0.0, x)


@dataclass
class ForwardResult:
    score: np.ndarray  # (H, W) predicted score map
    offsets: np.ndarray  # (M, K, 2) center-to-keypoint displacements at ``cells``
    cells: np.ndarray  # (M, 2) integer (x, y)
    kqe: list  # per keypoint KqeOutput at ``cells``
    pose_feature: np.ndarray  # (H*W, C_I*K)
    cache: dict

    def patch_signature(self) -> np.ndarray:
        """Bilinear patches used by every sample whose position depends on the parameters."""
        tapes = [self.cache["pqe_tape"].sample_tape]
        for t in self.cache["kqe_tapes"]:
            tapes += [t.query_tape, t.semantic_tape]
        return np.concatenate([t.patch_signature() for t in tapes])

    def offset_field(self, geom_shape) -> np.ndarray:
        """Scatter the cell offsets into a ``(2K, H, W)`` field (zeros at other cells)."""
        h, w = geom_shape
        m, k, _ = self.offsets.shape
        out = np.zeros((2 * k, h, w))
        flat = self.offsets.reshape(m, 2 * k).T
        out[:, self.cells[:, 1], self.cells[:, 0]] = flat
        return out


class TinyModel:
    def __init__(self, shape: ModelShape, params: dict[str, np.ndarray]):
        self.shape = shape
        self.params = params

    @classmethod
    def create(cls, shape: ModelShape = ModelShape(), seed: int = 0) -> TinyModel:
        return cls(shape, init_params(shape, seed))

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> TinyModel:
        return TinyModel(self.shape, {k: v.copy() for k, v in self.params.items()})

    def forward(self, x: np.ndarray, cells: np.ndarray | None = None) -> ForwardResult:
        """Run the network on a ``(K, H, W)`` input.

        Offsets are computed at ``cells`` (``(M, 2)`` integer x, y); ``None``
        means every cell in row-major order.
        """
        p, s = self.params, self.shape
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != s.num_keypoints:
            raise ShapeMismatch(f"input {x.shape} does not have {s.num_keypoints} channels")
        _, h, w = x.shape
        cache = {"x_shape": x.shape}
        feats = x
        for li, dil in enumerate(DILATIONS, start=1):
            pre, cols = conv3x3(feats, p[f"conv{li}_w"], p[f"conv{li}_b"], dil)
            cache[f"cols{li}"] = cols
            cache[f"in{li}_shape"] = feats.shape
            cache[f"pre{li}"] = pre
            feats = softplus(pre)
        rg = feats
        rg_flat = rg.reshape(s.channels, h * w)
        cache["rg_flat"] = rg_flat

        rk = [(p["kp_w"][i] @ rg_flat + p["kp_b"][i][:, None]).reshape(-1, h, w) for i in range(s.num_keypoints)]
        ri = (p["inst_w"] @ rg_flat + p["inst_b"][:, None]).reshape(-1, h, w)

        all_cells = np.stack(np.meshgrid(np.arange(w), np.arange(h)), axis=-1).reshape(-1, 2)
        all_cells_f = all_cells.astype(np.float64)
        # step one of KQE on every lattice cell: sampling there is an exact read, so the
        # query head reduces to a 1x1 map over the grid
        disp = np.empty((h * w, s.num_keypoints, 2))
        for i in range(s.num_keypoints):
            disp[:, i] = (s.query_gain * (p["query_w"][i] @ rk[i].reshape(-1, h * w))).T + s.query_gain * p["query_b"][i]
        pose_feat, pqe_tape = pqe_forward_with_tape(ri, all_cells_f, disp)
        logits = pose_feat @ p["score_w"] + p["score_b"]
        score = sigmoid(logits).reshape(h, w)

        cells = all_cells if cells is None else np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        outs, kqe_tapes = [], []
        for i in range(s.num_keypoints):
            out, tape = kqe_forward_with_tape(rk[i], cells.astype(np.float64), kqe_params(p, s, i))
            outs.append(out)
            kqe_tapes.append(tape)
        offsets = np.stack([o.total_offset for o in outs], axis=1) if outs else np.zeros((len(cells), 0, 2))

        cache.update(rk_flat=[r.reshape(-1, h * w) for r in rk], pqe_tape=pqe_tape, kqe_tapes=kqe_tapes, score=score, hw=(h, w))
        return ForwardResult(score, offsets, cells, outs, pose_feat, cache)

    def backward(self, fwd: ForwardResult, d_score=None, d_offsets=None) -> dict[str, np.ndarray]:
        """Gradients of a scalar w.r.t. every parameter, given its cotangents on the outputs.

        ``d_score`` is ``(H, W)``; ``d_offsets`` is ``(M, K, 2)`` aligned with ``fwd.cells``.
        """
        p, s, cache = self.params, self.shape, fwd.cache
        h, w = cache["hw"]
        k = s.num_keypoints
        g = {name: np.zeros_like(v) for name, v in p.items()}
        d_rk = [np.zeros((s.keypoint_channels, h, w)) for _ in range(k)]
        d_ri = np.zeros((s.instance_channels, h, w))

        if d_score is not None:
            sc = cache["score"].reshape(-1)
            d_logit = np.asarray(d_score, dtype=np.float64).reshape(-1) * sc * (1.0 - sc)
            g["score_w"] = fwd.pose_feature.T @ d_logit
            g["score_b"] = np.array(d_logit.sum())
            d_pf = np.outer(d_logit, p["score_w"])
            d_ri, _, d_disp = cache["pqe_tape"].backward(d_pf)
            for i in range(k):
                dd = d_disp[:, i]
                g["query_w"][i] += s.query_gain * (dd.T @ cache["rk_flat"][i].T)
                g["query_b"][i] += s.query_gain * dd.sum(axis=0)
                d_rk[i] += (s.query_gain * (p["query_w"][i].T @ dd.T)).reshape(-1, h, w)

        if d_offsets is not None:
            d_off = np.asarray(d_offsets, dtype=np.float64)
            for i in range(k):
                r = cache["kqe_tapes"][i].backward(d_total_offset=d_off[:, i])
                d_rk[i] += r["rk"]
                for name, gain in (("query", s.query_gain), ("semantic", s.semantic_gain), ("refine", s.refine_gain)):
                    g[f"{name}_w"][i] += gain * r[f"{name}_w"]
                    g[f"{name}_b"][i] += gain * r[f"{name}_b"]

        rg_flat = cache["rg_flat"]
        d_rg = np.zeros_like(rg_flat)
        for i in range(k):
            dk = d_rk[i].reshape(s.keypoint_channels, h * w)
            g["kp_w"][i] = dk @ rg_flat.T
            g["kp_b"][i] = dk.sum(axis=1)
            d_rg += p["kp_w"][i].T @ dk
        di = d_ri.reshape(s.instance_channels, h * w)
        g["inst_w"] = di @ rg_flat.T
        g["inst_b"] = di.sum(axis=1)
        d_rg += p["inst_w"].T @ di

        d_feat = d_rg.reshape(s.channels, h, w)
        for li in reversed(range(1, len(DILATIONS) + 1)):
            d_pre = d_feat * sigmoid(cache[f"pre{li}"])
            d_feat, g[f"conv{li}_w"], g[f"conv{li}_b"] = conv3x3_backward(
                d_pre, cache[f"cols{li}"], p[f"conv{li}_w"], cache[f"in{li}_shape"], DILATIONS[li - 1]
            )
        return g
