from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mblstm import tensor as T
from mblstm.errors import ContractError, DimensionError, NumericError
from mblstm.gradcheck import check_gradients
from mblstm.tensor import Tensor
from mblstm.verify import GRADIENT_CASES, gradient_errors


def arr(*rows):
    return np.array(rows, dtype=np.float64)[None, None]


# ------------------------------------------------------------------ conv2d


def test_conv_all_ones_counts_overlap():
    x = T.ones((1, 1, 3, 3))
    w = T.ones((1, 1, 3, 3))
    out = T.conv2d(x, w, T.zeros((1, 1, 1, 1)), stride=1, pad=1).data[0, 0]
    assert out[1, 1] == 9.0
    assert out[0, 0] == out[0, 2] == out[2, 0] == out[2, 2] == 4.0
    assert out[0, 1] == out[1, 0] == out[1, 2] == out[2, 1] == 6.0


def test_conv_identity_kernel():
    x = T.randn((2, 1, 5, 7), seed=3)
    out = T.conv2d(x, T.ones((1, 1, 1, 1)), T.zeros((1, 1, 1, 1)))
    assert np.array_equal(out.data, x.data)


def test_conv_matches_direct_loop():
    x = T.randn((2, 3, 6, 5), seed=1)
    w = T.randn((4, 3, 3, 3), seed=2)
    b = T.randn((1, 4, 1, 1), seed=3)
    got = T.conv2d(x, w, b, stride=2, pad=1).data
    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ho, wo = (6 + 2 - 3) // 2 + 1, (5 + 2 - 3) // 2 + 1
    ref = np.zeros((2, 4, ho, wo))
    for n in range(2):
        for o in range(4):
            for i in range(ho):
                for j in range(wo):
                    ref[n, o, i, j] = np.sum(xp[n, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w.data[o]) + b.data[0, o, 0, 0]
    assert got.shape == (2, 4, ho, wo)
    assert np.allclose(got, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3, 5]), stride=st.integers(1, 3),
       pad=st.integers(0, 2))
def test_conv_output_size(h, w, k, stride, pad):
    if h + 2 * pad < k or w + 2 * pad < k:
        return
    out = T.conv2d(T.zeros((1, 2, h, w)), T.zeros((3, 2, k, k)), stride=stride, pad=pad)
    assert out.shape == (1, 3, (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1)


def test_conv_errors():
    with pytest.raises(DimensionError, match="channels"):
        T.conv2d(T.zeros((1, 2, 4, 4)), T.zeros((1, 3, 3, 3)))
    with pytest.raises(DimensionError, match="odd"):
        T.conv2d(T.zeros((1, 1, 4, 4)), T.zeros((1, 1, 2, 2)))
    bad = T.zeros((1, 1, 3, 3))
    bad.data[0, 0, 1, 1] = np.nan
    with pytest.raises(NumericError):
        T.conv2d(bad, T.ones((1, 1, 3, 3)))


# ------------------------------------------------------------ activations


def test_relu_sigmoid_examples():
    assert np.array_equal(T.relu(Tensor(arr([-2.0, 0.0, 3.0]))).data.ravel(), [0, 0, 3])
    assert T.sigmoid(T.zeros((1, 1, 1, 1))).item() == 0.5


@pytest.mark.parametrize("mode", ["single", "double"])
def test_sigmoid_strictly_inside_unit_interval(mode):
    with T.precision(mode):
        out = T.sigmoid(Tensor(arr([-1e3, -50.0, 0.0, 50.0, 1e3]))).data
    assert np.all(out > 0) and np.all(out < 1)


@pytest.mark.parametrize("op", [T.relu, T.sigmoid, T.tanh])
def test_activations_reject_non_finite(op):
    with pytest.raises(NumericError):
        op(Tensor(arr([0.0, np.inf])))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (1, 2, 3, 3), elements=st.floats(-1e3, 1e3)))
def test_no_overflow_on_bounded_inputs(values):
    x = Tensor(values)
    for out in (T.relu(x), T.sigmoid(x), T.tanh(x), T.maxpool2(T.upsample2_nearest(x))):
        assert np.isfinite(out.data).all()
    w = Tensor(np.ones((1, 2, 3, 3)))
    assert np.isfinite(T.conv2d(x, w, pad=1).data).all()


# ------------------------------------------------------------ pooling


def test_maxpool_block():
    assert T.maxpool2(Tensor(arr([1.0, 2.0], [3.0, 4.0]))).item() == 4.0


def test_maxpool_ties_go_to_first_in_scan_order():
    x = Tensor(np.full((1, 1, 4, 4), 2.5), requires_grad=True)
    y = T.maxpool2(x)
    assert np.all(y.data == 2.5)
    T.backward(T.sum_all(y))
    expected = np.zeros((4, 4))
    expected[::2, ::2] = 1
    assert np.array_equal(x.grad[0, 0], expected)


def test_maxpool_odd_dims():
    with pytest.raises(DimensionError):
        T.maxpool2(T.zeros((1, 1, 3, 4)))


def test_avgpool_examples():
    assert np.array_equal(T.avgpool_down(T.ones((1, 1, 4, 4)), 2).data, np.ones((1, 1, 2, 2)))
    assert T.avgpool_down(Tensor(arr([0.0, 2.0], [4.0, 2.0])), 2).item() == 2.0
    with pytest.raises(DimensionError):
        T.avgpool_down(T.zeros((1, 1, 6, 6)), 4)


def test_upsample_blocks_and_inverse():
    x = Tensor(arr([1.0, 2.0], [3.0, 4.0]))
    up = T.upsample2_nearest(x).data[0, 0]
    assert np.array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])
    r = T.randn((2, 3, 5, 4), seed=9)
    assert np.array_equal(T.avgpool_down(T.upsample2_nearest(r), 2).data, r.data)


# ------------------------------------------------------------ structural / arithmetic


def test_concat_and_slice_recover_inputs():
    a, b = T.randn((1, 2, 3, 3), seed=1), T.randn((1, 3, 3, 3), seed=2)
    c = T.concat_channels([a, b])
    assert c.shape == (1, 5, 3, 3)
    assert np.array_equal(T.slice_channels(c, 0, 2).data, a.data)
    assert np.array_equal(T.slice_channels(c, 2, 5).data, b.data)
    with pytest.raises(DimensionError):
        T.concat_channels([a, T.zeros((1, 1, 4, 3))])


def test_add_zero_and_shape_mismatch():
    x = T.randn((1, 2, 3, 3), seed=4)
    assert np.array_equal(T.add(x, T.zeros(x.shape)).data, x.data)
    with pytest.raises(DimensionError):
        T.mul(x, T.zeros((1, 2, 3, 4)))


# ------------------------------------------------------------ backward


def test_backward_sum_gives_ones():
    x = T.randn((2, 3, 4, 5), seed=0, requires_grad=True)
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_backward_square_gives_2x():
    x = T.randn((1, 2, 3, 3), seed=1, requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    assert np.allclose(x.grad, 2 * x.data)


def test_backward_contracts():
    x = T.randn((1, 1, 2, 2), seed=0, requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, x))  # not scalar
    loss = T.sum_all(x)
    T.backward(loss)
    with pytest.raises(ContractError):
        T.backward(loss)  # second call on the same graph
    with pytest.raises(ContractError):
        T.backward(T.sum_all(x))  # leaf still holds a gradient
    T.zero_grad([x])
    T.backward(T.sum_all(x))
    assert np.array_equal(x.grad, np.ones(x.shape))


def test_two_layer_conv_net_gradient():
    gen = T.rng(0)
    x = Tensor(gen.standard_normal((2, 3, 6, 6)), requires_grad=True)
    w1 = Tensor(gen.standard_normal((4, 3, 3, 3)) * 0.3, requires_grad=True)
    b1 = Tensor(gen.standard_normal((1, 4, 1, 1)) * 0.1 + 0.2, requires_grad=True)
    w2 = Tensor(gen.standard_normal((2, 4, 3, 3)) * 0.3, requires_grad=True)

    def loss():
        h = T.tanh(T.conv2d(x, w1, b1, pad=1))
        return T.mean_all(T.sigmoid(T.conv2d(h, w2, pad=1)))

    assert check_gradients(loss, [x, w1, b1, w2]) < 1e-4


def test_backward_deterministic():
    grads = []
    for _ in range(2):
        x = T.randn((1, 2, 6, 6), seed=5, requires_grad=True)
        w = T.randn((3, 2, 3, 3), seed=6, requires_grad=True)
        T.backward(T.sum_all(T.maxpool2(T.relu(T.conv2d(x, w, pad=1)))))
        grads.append((x.grad.copy(), w.grad.copy()))
    assert all(np.array_equal(a, b) for a, b in zip(grads[0], grads[1]))


def test_no_grad_records_nothing():
    x = T.randn((1, 1, 2, 2), seed=0, requires_grad=True)
    with T.no_grad():
        y = T.mul(x, x)
    assert not y.requires_grad and y.is_leaf


# ------------------------------------------------------------ gradient cases (fast subset of seeds)


@pytest.mark.parametrize("name", [n for n in GRADIENT_CASES if n != "network"])
def test_gradient_case_three_seeds(name):
    assert max(gradient_errors(name, seeds=range(3))) < 1e-4


def test_gradcheck_detects_perturbation():
    errs = gradient_errors("conv2d", seeds=[0], perturb=0.01)
    assert errs[0] > 1e-4


def test_gradcheck_requires_double():
    x = T.randn((1, 1, 2, 2), seed=0, requires_grad=True)
    with T.precision("single"), pytest.raises(ContractError):
        check_gradients(lambda: T.sum_all(x), [x])


# ------------------------------------------------------------ creation / precision


def test_randn_deterministic_and_mean():
    a, b = T.randn((1, 1, 64, 64), seed=42), T.randn((1, 1, 64, 64), seed=42)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, T.randn((1, 1, 64, 64), seed=43).data)
    assert abs(a.data.mean()) < 4 / np.sqrt(4096)


def test_randn_frozen_values():
    # Philox keyed by the seed, ziggurat normals: pinned so a platform or numpy change is caught
    got = T.randn((1, 1, 1, 3), seed=0).data.ravel()
    assert got.tolist() == [-0.2059740286292238, -0.12884495093462758, -0.28978987549091256]


def test_zeros_and_shape_rule():
    z = T.zeros((1, 2, 3, 4))
    assert z.size == 24 and not z.data.any()
    with pytest.raises(DimensionError):
        Tensor(np.zeros((2, 3)))


def test_precision_modes():
    with T.precision("single"):
        assert T.randn((1, 1, 2, 2), seed=0).data.dtype == np.float32
    assert T.randn((1, 1, 2, 2), seed=0).data.dtype == np.float64
    with pytest.raises(ContractError):
        T.set_precision("half")


@pytest.mark.parametrize("mode", ["single", "double"])
def test_tanh_stays_open_interval(mode):
    with T.precision(mode):
        out = T.tanh(T.tensor([[[[-50.0, 50.0, 0.0]]]])).data
        assert np.all((out > -1) & (out < 1))
        assert out[0, 0, 0, 2] == 0.0
