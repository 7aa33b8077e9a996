import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cirpose.core import ShapeMismatch
from cirpose.qem import (
    KqeParams,
    TapeMismatch,
    bilinear_sample,
    bilinear_sample_with_tape,
    kqe_forward,
    pqe_forward,
    qem_backward,
)

from gradcheck import bilinear_pairs, kqe_case, kqe_params, kqe_pairs, pqe_pairs, rel_err
from oracles import scalar_bilinear, scalar_kqe, scalar_pqe

SEEDS = range(20)


# ------------------------------------------------------------- bilinear


def test_bilinear_examples():
    grid = np.arange(2 * 4 * 5, dtype=float).reshape(2, 4, 5)
    assert np.array_equal(bilinear_sample(grid, (3.0, 2.0)), grid[:, 2, 3])
    quad = np.zeros((1, 2, 2))
    quad[0, 1, 1] = 4.0
    assert bilinear_sample(quad, (0.5, 0.5))[0] == 1.0
    assert np.array_equal(bilinear_sample(grid, (-5.0, -5.0)), grid[:, 0, 0])
    assert np.array_equal(bilinear_sample(grid, (99.0, 99.0)), grid[:, 3, 4])
    assert bilinear_sample(grid, np.zeros((4, 2))).shape == (4, 2)


@given(st.integers(0, 10_000), st.floats(-3, 12), st.floats(-3, 10))
def test_bilinear_matches_scalar_oracle(seed, x, y):
    grid = np.random.default_rng(seed).normal(size=(2, 7, 9))
    assert bilinear_sample(grid, (x, y)) == pytest.approx(scalar_bilinear(grid.tolist(), x, y), abs=1e-12)


@given(st.integers(0, 10_000), st.integers(0, 7), st.integers(0, 5), st.floats(0, 1), st.floats(0, 1))
def test_bilinear_is_linear_along_axes_within_a_cell(seed, cx, cy, t, u):
    grid = np.random.default_rng(seed).normal(size=(1, 7, 9))
    a = bilinear_sample(grid, (cx, cy + u))
    b = bilinear_sample(grid, (cx + 1, cy + u))
    assert bilinear_sample(grid, (cx + t, cy + u)) == pytest.approx((1 - t) * a + t * b, abs=1e-12)


def test_bilinear_degenerate_grids():
    assert bilinear_sample(np.full((1, 1, 1), 3.0), (0.7, -2.0))[0] == 3.0
    row = np.array([[[0.0, 2.0, 4.0]]])
    assert bilinear_sample(row, (1.5, 0.0))[0] == 3.0


def test_bilinear_positional_gradients():
    const = np.full((2, 5, 5), 7.0)
    _, tape = bilinear_sample_with_tape(const, (1.3, 2.6))
    assert np.all(qem_backward(tape, np.ones(2))[1] == 0.0)
    ramp = np.broadcast_to(np.arange(6.0), (1, 5, 6)).copy()
    for p in ((1.3, 2.6), (4.2, 0.5), (0.4, 3.9)):
        _, tape = bilinear_sample_with_tape(ramp, p)
        assert qem_backward(tape, np.ones(1))[1].tolist() == [1.0, 0.0]
    # clamped axis has zero positional gradient
    _, tape = bilinear_sample_with_tape(ramp, (-2.0, 1.5))
    assert qem_backward(tape, np.ones(1))[1].tolist() == [0.0, 0.0]


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_gradients_match_finite_differences(seed):
    for label, analytic, numeric in bilinear_pairs(seed):
        assert rel_err(analytic, numeric) < 1e-4, label


def test_cotangent_shape_checked():
    _, tape = bilinear_sample_with_tape(np.zeros((2, 3, 3)), np.zeros((4, 2)))
    with pytest.raises(TapeMismatch):
        tape.backward(np.zeros((4, 3)))
    with pytest.raises(TapeMismatch):
        qem_backward(object())


# ------------------------------------------------------------------ KQE


def test_kqe_zero_weights_collapse():
    rng = np.random.default_rng(0)
    rk = rng.normal(size=(4, 6, 6))
    out = kqe_forward(rk, (2.0, 3.0), KqeParams.zeros(4, 9))
    assert np.all(out.query_displacement == 0) and np.array_equal(out.query_position, [2.0, 3.0])
    assert np.all(out.semantic_offsets == 0)
    assert np.allclose(out.transformed_feature, 9 * rk[:, 3, 2], atol=1e-12)
    assert np.all(out.total_offset == 0)


def test_kqe_without_semantic_points():
    rng = np.random.default_rng(1)
    rk = rng.normal(size=(3, 6, 6))
    p = kqe_params(rng, 3, 0)
    out = kqe_forward(rk, (2.5, 2.5), p)
    assert np.all(out.transformed_feature == 0)
    assert np.array_equal(out.refine_displacement, p.refine_b)
    assert np.array_equal(out.total_offset, out.query_displacement + p.refine_b)


@pytest.mark.parametrize("seed", range(10))
def test_kqe_matches_scalar_oracle(seed):
    rng = np.random.default_rng(seed)
    rk = rng.normal(size=(3, 5, 5))
    p = kqe_params(rng, 3, 2)
    c = rng.uniform(0, 4, 2)
    out = kqe_forward(rk, c, p)
    d_cq, q, total, transformed = scalar_kqe(rk.tolist(), c[0], c[1], p.query_w, p.query_b,
                                             p.semantic_w, p.semantic_b, p.refine_w, p.refine_b)
    assert out.query_displacement == pytest.approx(d_cq, abs=1e-12)
    assert out.query_position == pytest.approx(q, abs=1e-12)
    assert out.total_offset == pytest.approx(total, abs=1e-12)
    assert out.transformed_feature == pytest.approx(transformed, abs=1e-12)


def test_kqe_batched_equals_single():
    rk, centers, p = kqe_case(3, m=4)
    batch = kqe_forward(rk, centers, p)
    for j, c in enumerate(centers):
        one = kqe_forward(rk, c, p)
        assert np.allclose(one.total_offset, batch.total_offset[j], rtol=0, atol=1e-12)


def test_kqe_deterministic_and_validated():
    rk, centers, p = kqe_case(4)
    a, b = kqe_forward(rk, centers, p), kqe_forward(rk, centers, p)
    assert np.array_equal(a.total_offset, b.total_offset)
    with pytest.raises(ShapeMismatch):
        kqe_forward(rk[:2], centers, p)


@pytest.mark.parametrize("seed", SEEDS)
def test_kqe_gradients_match_finite_differences(seed):
    for label, analytic, numeric in kqe_pairs(seed):
        assert rel_err(analytic, numeric) < 1e-4, label


# ------------------------------------------------------------------ PQE


def test_pqe_examples():
    rng = np.random.default_rng(2)
    ri = rng.normal(size=(3, 6, 6))
    out = pqe_forward(ri, (2.0, 1.0), np.zeros((4, 2)))
    assert np.array_equal(out, np.tile(ri[:, 1, 2], 4))
    one = pqe_forward(ri, (2.0, 1.0), [[0.4, 1.7]])
    assert np.array_equal(one, bilinear_sample(ri, (2.4, 2.7)))
    disp = rng.normal(size=(2, 2))
    assert pqe_forward(ri, (2.5, 2.5), disp) == pytest.approx(scalar_pqe(ri.tolist(), 2.5, 2.5, disp), abs=1e-12)


@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 5))
def test_pqe_length_is_channels_times_keypoints(k, c, m):
    ri = np.ones((c, 4, 4))
    assert pqe_forward(ri, (1.0, 1.0), np.zeros((k, 2))).shape == (c * k,)
    assert pqe_forward(ri, np.ones((m, 2)), np.zeros((m, k, 2))).shape == (m, c * k)


def test_pqe_shape_errors():
    with pytest.raises(ShapeMismatch):
        pqe_forward(np.zeros((2, 3, 3)), np.zeros((2, 2)), np.zeros((3, 4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_pqe_gradients_match_finite_differences(seed):
    for label, analytic, numeric in pqe_pairs(seed):
        assert rel_err(analytic, numeric) < 1e-4, label
