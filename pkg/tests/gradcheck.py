"""Central-difference helpers shared by the gradient tests."""

import numpy as np

EPS = 1e-4


def rel_err(analytic, numeric, floor=1e-6):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``, reduced with max.

    The floor keeps entries that are zero up to truncation error from
    dominating the relative measure.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def numeric_grad(f, x, eps=EPS):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        hi = f()
        x[idx] = orig - eps
        lo = f()
        x[idx] = orig
        g[idx] = (hi - lo) / (2 * eps)
    return g


# ------------------------------------------------------- seeded instances
#
# Each ``*_pairs(seed)`` builds one random instance and returns a list of
# ``(label, analytic, numeric)`` gradients. Sample points are kept off cell
# edges and the grid border so the piecewise-bilinear kinks never sit inside
# a central-difference stencil.

MARGIN = 0.05


def interior(points, h, w, margin=MARGIN):
    """True when every point is inside the grid and away from cell edges."""
    p = np.asarray(points).reshape(-1, 2)
    fx, fy = p[:, 0] - np.floor(p[:, 0]), p[:, 1] - np.floor(p[:, 1])
    inside = (p[:, 0] > margin) & (p[:, 0] < w - 1 - margin) & (p[:, 1] > margin) & (p[:, 1] < h - 1 - margin)
    return bool(np.all(inside & (fx > margin) & (fx < 1 - margin) & (fy > margin) & (fy < 1 - margin)))


def kqe_params(rng, c, n, scale=0.3):
    from cirpose.qem import KqeParams

    return KqeParams(
        rng.normal(0, scale, (2, c)), rng.normal(0, 1.0, 2),
        rng.normal(0, scale, (2 * n, c)), rng.normal(0, 1.0, 2 * n),
        rng.normal(0, scale, (2, c)), rng.normal(0, 0.5, 2),
    )


def kqe_case(seed, c=3, n=2, h=9, w=10, m=3):
    """Seeded KQE case whose sample points all sit in cell interiors."""
    from cirpose.qem import kqe_forward

    rng = np.random.default_rng(seed)
    for _ in range(1000):
        rk = rng.normal(0, 1, (c, h, w))
        params = kqe_params(rng, c, n)
        centers = rng.uniform(2.5, 6.5, (m, 2))
        out = kqe_forward(rk, centers, params)
        pts = [centers, out.query_position, out.query_position[:, None] + out.semantic_offsets]
        if all(interior(p, h, w) for p in pts):
            return rk, centers, params
    raise RuntimeError("no interior case found")


def bilinear_pairs(seed):
    from cirpose.qem import bilinear_sample, bilinear_sample_with_tape

    rng = np.random.default_rng(seed)
    grid = rng.normal(size=(3, 6, 7))
    pts = rng.uniform(0.5, 5.0, (4, 2))
    while not interior(pts, 6, 7):
        pts = rng.uniform(0.5, 5.0, (4, 2))
    cot = rng.normal(size=(4, 3))
    f = lambda: float(np.sum(cot * bilinear_sample(grid, pts)))
    _, tape = bilinear_sample_with_tape(grid, pts)
    d_grid, d_pts = tape.backward(cot)
    return [("grid", d_grid, numeric_grad(f, grid)), ("points", d_pts, numeric_grad(f, pts))]


def kqe_pairs(seed):
    from cirpose.qem import kqe_forward, kqe_forward_with_tape, qem_backward

    rk, centers, p = kqe_case(seed)
    rng = np.random.default_rng(1000 + seed)
    c_tot, c_q, c_t = rng.normal(size=(3, 2)), rng.normal(size=(3, 2)), rng.normal(size=(3, 3))

    def f():
        o = kqe_forward(rk, centers, p)
        return float(np.sum(c_tot * o.total_offset) + np.sum(c_q * o.query_position)
                     + np.sum(c_t * o.transformed_feature))

    _, tape = kqe_forward_with_tape(rk, centers, p)
    g = qem_backward(tape, c_tot, c_q, c_t)
    out = [("rk", g["rk"], numeric_grad(f, rk)), ("centers", g["centers"], numeric_grad(f, centers))]
    for name in ("query_w", "query_b", "semantic_w", "semantic_b", "refine_w", "refine_b"):
        out.append((name, g[name], numeric_grad(f, getattr(p, name))))
    return out


def pqe_pairs(seed):
    from cirpose.qem import pqe_forward, pqe_forward_with_tape, qem_backward

    rng = np.random.default_rng(seed)
    ri = rng.normal(size=(3, 7, 7))
    centers = rng.uniform(2, 4, (3, 2))
    disp = rng.uniform(-1.5, 1.5, (3, 4, 2))
    while not interior(centers[:, None] + disp, 7, 7):
        disp = rng.uniform(-1.5, 1.5, (3, 4, 2))
    cot = rng.normal(size=(3, 12))
    f = lambda: float(np.sum(cot * pqe_forward(ri, centers, disp)))
    _, tape = pqe_forward_with_tape(ri, centers, disp)
    d_ri, d_c, d_d = qem_backward(tape, cot)
    return [("ri", d_ri, numeric_grad(f, ri)), ("centers", d_c, numeric_grad(f, centers)),
            ("displacements", d_d, numeric_grad(f, disp))]


def weighted_l2_pairs(seed):
    from cirpose.losses import weighted_l2

    rng = np.random.default_rng(seed)
    p, t = rng.uniform(0, 1, (5, 6)), rng.uniform(0, 1, (5, 6))
    w = rng.choice([0.1, 1.0], (5, 6))
    g = numeric_grad(lambda: weighted_l2(p, t, w).value, p)
    return [("pred", weighted_l2(p, t, w).grad, g)]


def smooth_l1_pairs(seed):
    from cirpose.losses import smooth_l1

    rng = np.random.default_rng(seed)
    p, t = rng.normal(0, 2, (4, 10)), rng.normal(0, 2, (4, 10))
    # keep residuals away from the kink at |r| = 1
    near = np.abs(np.abs(p - t) - 1.0) < 1e-3
    p[near] += 0.01
    m = rng.random((4, 10)) < 0.7
    g = numeric_grad(lambda: smooth_l1(p, t, m).value, p)
    return [("pred", smooth_l1(p, t, m).grad, g)]
