"""Independent reference implementations used as test oracles.

Everything here is written with plain Python loops and ``math`` so that it
shares no code path with the package under test.
"""

from __future__ import annotations

import math


# ---------------------------------------------------------------- OKS


def scalar_oks(pred_xy, gt_xy, gt_vis, scale, k):
    num, den = 0.0, 0
    for (px, py), (gx, gy), v, ki in zip(pred_xy, gt_xy, gt_vis, k):
        if v > 0:
            d2 = (float(px) - float(gx)) ** 2 + (float(py) - float(gy)) ** 2
            num += math.exp(-d2 / (2.0 * scale * scale * ki * ki))
            den += 1
    if den == 0:
        raise ValueError("no visible keypoints")
    return num / den


def extent_scale(xy):
    xs = [float(p[0]) for p in xy]
    ys = [float(p[1]) for p in xy]
    return max(math.sqrt((max(xs) - min(xs)) * (max(ys) - min(ys))), 1e-6)


# ----------------------------------------------------------- sampling


def scalar_bilinear(grid, x, y):
    """Bilinear read of ``grid[c][row][col]`` at (x, y) with border clamping."""
    c, h, w = len(grid), len(grid[0]), len(grid[0][0])
    x = min(max(float(x), 0.0), w - 1.0)
    y = min(max(float(y), 0.0), h - 1.0)
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    ax, ay = x - x0, y - y0
    out = []
    for ch in range(c):
        g = grid[ch]
        top = g[y0][x0] * (1 - ax) + g[y0][x1] * ax
        bot = g[y1][x0] * (1 - ax) + g[y1][x1] * ax
        out.append(top * (1 - ay) + bot * ay)
    return out


def _affine(w, b, v):
    return [sum(float(w[r][j]) * v[j] for j in range(len(v))) + float(b[r]) for r in range(len(b))]


def scalar_kqe(rk, cx, cy, qw, qb, sw, sb, fw, fb):
    """Straight-line keypoint query encoding at one center.

    Returns ``(d_cq, q, total, transformed)`` as plain lists.
    """
    f_c = scalar_bilinear(rk, cx, cy)
    d_cq = _affine(qw, qb, f_c)
    qx, qy = cx + d_cq[0], cy + d_cq[1]
    f_q = scalar_bilinear(rk, qx, qy)
    offs = _affine(sw, sb, f_q)
    transformed = [0.0] * len(rk)
    for n in range(len(offs) // 2):
        v = scalar_bilinear(rk, qx + offs[2 * n], qy + offs[2 * n + 1])
        transformed = [a + b for a, b in zip(transformed, v)]
    d_qk = _affine(fw, fb, transformed)
    return d_cq, (qx, qy), [d_cq[0] + d_qk[0], d_cq[1] + d_qk[1]], transformed


def scalar_pqe(ri, cx, cy, displacements):
    out = []
    for dx, dy in displacements:
        out += scalar_bilinear(ri, cx + dx, cy + dy)
    return out


# ---------------------------------------------------------------- NMS


def greedy_nms(poses, scores, threshold, k):
    """Reference greedy suppression returning kept input indices.

    Walks candidates by descending score (ties by input order) and keeps one
    when its OKS against every already-kept candidate, with the kept one as
    reference, is at most ``threshold``.
    """
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            ref = poses[j]
            sim = scalar_oks(poses[i], ref, [1] * len(ref), extent_scale(ref), k)
            if sim > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


# ---------------------------------------------------------- evaluator

THRESHOLDS = [0.5 + 0.05 * i for i in range(10)]
BANDS = {"all": (0.0, float("inf")), "medium": (32.0 ** 2, 96.0 ** 2), "large": (96.0 ** 2, float("inf"))}


def _ap_one(images, threshold, band, k, stride, max_dets=20):
    lo, hi = band
    pooled = []  # (score, tp, ignored)
    npos = 0
    for dets, gts in images:
        g_ign = [not (lo <= g["area"] < hi) for g in gts]
        npos += sum(1 for x in g_ign if not x)
        ranked = sorted(range(len(dets)), key=lambda i: -dets[i]["score"])[:max_dets]
        taken = [False] * len(gts)
        for i in ranked:
            d = dets[i]
            choice = None
            for want_ignored in (False, True):
                best, best_j = -1.0, None
                for j, g in enumerate(gts):
                    if taken[j] or g_ign[j] != want_ignored:
                        continue
                    s = scalar_oks(d["xy"], g["xy"], g["vis"], g["scale"], k)
                    if s >= threshold and s > best:
                        best, best_j = s, j
                if best_j is not None:
                    choice = (best_j, want_ignored)
                    break
            if choice is not None:
                taken[choice[0]] = True
                pooled.append((d["score"], True, choice[1]))
            else:
                xs = [p[0] * stride for p in d["xy"]]
                ys = [p[1] * stride for p in d["xy"]]
                area = (max(xs) - min(xs)) * (max(ys) - min(ys))
                pooled.append((d["score"], False, not (lo <= area < hi)))
    if npos == 0:
        return None, None
    pooled = [p for p in sorted(pooled, key=lambda p: -p[0]) if not p[2]]
    tp = fp = 0
    rec, prec = [], []
    for _, is_tp, _ in pooled:
        tp += is_tp
        fp += not is_tp
        rec.append(tp / npos)
        prec.append(tp / (tp + fp))
    for i in range(len(prec) - 2, -1, -1):
        prec[i] = max(prec[i], prec[i + 1])
    total = 0.0
    for r in range(101):
        target = r / 100.0
        for rc, pr in zip(rec, prec):
            if rc >= target:
                total += pr
                break
    return total / 101.0, (rec[-1] if rec else 0.0)


def brute_force_summary(images, k, stride=1.0):
    """``images`` is a list of (dets, gts); dets are dicts with xy/score,
    gts dicts with xy/vis/scale/area. Returns the six summary metrics."""
    def mean_defined(vals):
        vals = [v for v in vals if v is not None]
        return sum(vals) / len(vals) if vals else -1.0

    out = {}
    per = {name: [_ap_one(images, t, band, k, stride) for t in THRESHOLDS] for name, band in BANDS.items()}
    aps = [a for a, _ in per["all"]]
    out["ap"] = mean_defined(aps)
    out["ap50"] = aps[0] if aps[0] is not None else -1.0
    out["ap75"] = aps[5] if aps[5] is not None else -1.0
    out["ap_m"] = mean_defined([a for a, _ in per["medium"]])
    out["ap_l"] = mean_defined([a for a, _ in per["large"]])
    out["ar"] = mean_defined([r for _, r in per["all"]])
    return out
