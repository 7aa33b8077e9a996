import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cirpose.core import ShapeMismatch
from cirpose.losses import LossValue, smooth_l1, total_loss, weighted_l2

from gradcheck import rel_err, smooth_l1_pairs, weighted_l2_pairs

finite = st.floats(-5, 5, allow_nan=False)


def test_weighted_l2_examples():
    x = np.array([[0.2, 0.4]])
    assert weighted_l2(x, x, np.ones_like(x)).value == 0.0
    assert weighted_l2([[0.75]], [[0.25]], [[1.0]]).value == 0.25
    fg = weighted_l2([[0.5, 0.0]], [[0.0, 0.0]], [[1.0, 0.1]]).value
    bg = weighted_l2([[0.0, 0.5]], [[0.0, 0.0]], [[1.0, 0.1]]).value
    assert fg == pytest.approx(10 * bg)
    with pytest.raises(ShapeMismatch):
        weighted_l2(np.zeros(3), np.zeros(3), np.zeros(4))


def test_smooth_l1_examples():
    assert smooth_l1([1.0, 2.0], [1.0, 2.0], [True, True]).value == 0.0
    assert smooth_l1([2.0], [0.0], [True]).value == 1.5
    assert smooth_l1([0.5], [0.0], [True]).value == 0.125
    empty = smooth_l1([3.0, 1.0], [0.0, 0.0], [False, False])
    assert empty.value == 0.0 and np.all(empty.grad == 0)
    # masked-out residuals contribute nothing
    assert smooth_l1([2.0, 100.0], [0.0, 0.0], [True, False]).value == 1.5
    with pytest.raises(ShapeMismatch):
        smooth_l1([1.0], [1.0, 2.0], [True, True])


def test_smooth_l1_gradient_clamped_in_linear_regime():
    g = smooth_l1([10.0, -7.0, 0.5], [0.0, 0.0, 0.0], [True, True, True]).grad * 3
    assert g.tolist() == [1.0, -1.0, 0.5]


def test_smooth_l1_continuous_and_c1_at_beta():
    lo = smooth_l1([1.0 - 1e-9], [0.0], [True])
    hi = smooth_l1([1.0 + 1e-9], [0.0], [True])
    assert abs(lo.value - hi.value) < 1e-8
    assert abs(lo.grad[0] - hi.grad[0]) < 1e-8


def test_total_loss_examples():
    a = LossValue(0.3, np.array([1.0]))
    b = LossValue(0.2, np.array([2.0]))
    assert total_loss(a, b).value == pytest.approx(0.5)
    only = total_loss(a, b, 1.0, 0.0)
    assert only.value == a.value and np.all(only.grads["offsets"] == 0)
    assert total_loss(LossValue(0.1), LossValue(0.3), 2.0, 1.0).value == pytest.approx(0.5)
    comb = total_loss(a, b, 2.0, 3.0)
    assert comb.grads["score"].tolist() == [2.0] and comb.grads["offsets"].tolist() == [6.0]
    with pytest.raises(ValueError):
        total_loss(a, b, -1.0, 1.0)


@given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (3, 4), elements=finite),
       arrays(np.float64, (3, 4), elements=st.sampled_from([0.0, 0.1, 1.0])))
def test_weighted_l2_nonnegative_and_zero_gradient_where_unweighted(p, t, w):
    out = weighted_l2(p, t, w)
    assert out.value >= 0
    assert np.all(out.grad[w == 0] == 0)
    if np.array_equal(p, t):
        assert out.value == 0


grid_vals = st.integers(-20, 20).map(lambda v: v / 4)


@given(arrays(np.float64, (5,), elements=grid_vals), arrays(np.float64, (5,), elements=grid_vals),
       arrays(bool, (5,)))
def test_smooth_l1_zero_exactly_at_supervised_equality(p, t, m):
    out = smooth_l1(p, t, m)
    assert out.value >= 0
    assert (out.value == 0) == np.array_equal(p[m], t[m])


@pytest.mark.parametrize("seed", range(20))
def test_weighted_l2_gradient_matches_finite_differences(seed):
    for label, analytic, numeric in weighted_l2_pairs(seed):
        assert rel_err(analytic, numeric) < 1e-6, label


@pytest.mark.parametrize("seed", range(20))
def test_smooth_l1_gradient_matches_finite_differences(seed):
    for label, analytic, numeric in smooth_l1_pairs(seed):
        assert rel_err(analytic, numeric) < 1e-6, label
