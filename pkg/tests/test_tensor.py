import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from fusionseg import checkpoint
from fusionseg.gradcheck import check_gradients
from fusionseg.optim import SGD, sgd_step
from fusionseg.tensor import (
    Graph, MacCounter, Parameter, ShapeError, Tensor, argmax_channel, backward,
    bilinear_kernel, concat_channel, conv2d, cross_entropy_loss, multiply, relu,
    slice_channel, softmax_channel, tensor_sum, upsample_scores,
)
from oracles import (
    argmax_scan, bilinear_resize, conv2d_direct, cross_entropy_direct, softmax_direct,
)


# --- conv2d ----------------------------------------------------------------

def test_conv_identity_kernel(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    out = conv2d(x, Parameter(np.ones((1, 1, 1, 1))), Parameter(np.zeros((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_sum_of_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Parameter(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


def test_conv_matches_direct_stride2_pad1(rng):
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(1, 3, 1, 1))
    out = conv2d(Tensor(x), Parameter(w), Parameter(b), stride=2, pad=1)
    assert out.shape == (1, 3, 3, 3)
    np.testing.assert_allclose(out.data, conv2d_direct(x, w, b, 2, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("n,c,h,k,stride,pad", [
    (2, 4, 8, 3, 1, 1), (2, 4, 8, 3, 2, 1), (1, 3, 7, 1, 1, 0), (2, 2, 8, 5, 2, 2), (1, 4, 6, 1, 2, 0),
])
def test_conv_matches_direct(rng, n, c, h, k, stride, pad):
    x = rng.normal(size=(n, c, h, h))
    w = rng.normal(size=(3, c, k, k))
    out = conv2d(Tensor(x), Parameter(w), None, stride, pad)
    np.testing.assert_allclose(out.data, conv2d_direct(x, w, None, stride, pad), rtol=0, atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeError, match="c=2.*c_in=3"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Parameter(np.zeros((1, 3, 3, 3))))


# --- relu, softmax, argmax --------------------------------------------------

def test_relu_values_and_gradient():
    np.testing.assert_array_equal(relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0, 0, 2])
    x = Tensor(np.array([-0.5, 0.0, 0.5]), requires_grad=True)
    with Graph() as g:
        loss = tensor_sum(relu(x))
    backward(loss, g)
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_relu_identity_on_nonnegative(rng):
    x = np.abs(rng.normal(size=(1, 2, 3, 3)))
    np.testing.assert_array_equal(relu(Tensor(x)).data, x)


def test_softmax_analytic_cases():
    p = softmax_channel(Tensor(np.zeros((1, 2, 1, 1)))).data.ravel()
    np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)
    p = softmax_channel(Tensor(np.array([0.0, math.log(3)]).reshape(1, 2, 1, 1))).data.ravel()
    np.testing.assert_allclose(p, [0.25, 0.75], atol=1e-15)


def test_softmax_matches_direct(rng):
    x = rng.normal(size=(1, 5, 3, 3)) * 3
    np.testing.assert_allclose(softmax_channel(Tensor(x)).data, softmax_direct(x), rtol=0, atol=1e-10)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (1, 4, 3, 2), elements=st.floats(-50, 50)))
def test_softmax_fibers_are_distributions(x):
    p = softmax_channel(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_argmax_cases(rng):
    assert argmax_channel(Tensor(np.array([0.1, 0.9]).reshape(1, 2, 1, 1)))[0, 0, 0] == 1
    assert argmax_channel(Tensor(np.array([0.5, 0.5]).reshape(1, 2, 1, 1)))[0, 0, 0] == 0
    x = rng.integers(0, 3, size=(2, 4, 5, 5)).astype(float)  # plenty of ties
    np.testing.assert_array_equal(argmax_channel(Tensor(x)), argmax_scan(x))


# --- concat ------------------------------------------------------------------

def test_concat_shapes_and_layout(rng):
    a, b = rng.normal(size=(1, 3, 2, 2)), rng.normal(size=(1, 3, 2, 2))
    out = concat_channel(Tensor(a), Tensor(b)).data
    assert out.shape == (1, 6, 2, 2)
    np.testing.assert_array_equal(out[0, 3 + 1], b[0, 1])
    empty = concat_channel(Tensor(a), Tensor(np.zeros((1, 0, 2, 2)))).data
    np.testing.assert_array_equal(empty, a)


def test_concat_rejects_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channel(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 2, 3))))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_concat_slice_roundtrip_and_gradient_split(ca, cb, seed):
    r = np.random.default_rng(seed)
    a = Tensor(r.normal(size=(1, ca, 3, 2)), requires_grad=True)
    b = Tensor(r.normal(size=(1, cb, 3, 2)), requires_grad=True)
    up = r.normal(size=(1, ca + cb, 3, 2))
    with Graph() as g:
        cat = concat_channel(a, b)
        loss = tensor_sum(multiply(cat, Tensor(up)))
    np.testing.assert_array_equal(slice_channel(cat, 0, ca).data, a.data)
    np.testing.assert_array_equal(slice_channel(cat, ca, ca + cb).data, b.data)
    backward(loss, g)
    np.testing.assert_array_equal(np.concatenate([a.grad, b.grad], axis=1), up)


# --- upsampling ---------------------------------------------------------------

def test_upsample_factor1_identity(rng):
    x = Tensor(rng.normal(size=(1, 3, 4, 5)))
    out = upsample_scores(x, Parameter(np.ones((3, 1, 1, 1))), 1, 4, 5)
    np.testing.assert_array_equal(out.data, x.data)


def test_upsample_preserves_constant():
    x = Tensor(np.full((1, 1, 2, 2), 2.5))
    out = upsample_scores(x, Parameter(bilinear_kernel(2)[None, None]), 2, 4, 4)
    np.testing.assert_allclose(out.data, np.full((1, 1, 4, 4), 2.5), rtol=0, atol=1e-14)


def test_upsample_ramp_matches_bilinear_resize():
    ramp = np.array([[0.0, 1.0], [2.0, 3.0]])
    out = upsample_scores(Tensor(ramp[None, None]), Parameter(bilinear_kernel(2)[None, None]), 2, 4, 4)
    ref = bilinear_resize(ramp, 4, 4)
    np.testing.assert_allclose(out.data[0, 0, 1:-1, 1:-1], ref[1:-1, 1:-1], rtol=0, atol=1e-10)


@pytest.mark.parametrize("factor,h,w", [(2, 3, 5), (4, 4, 4), (4, 3, 6), (8, 2, 3)])
def test_upsample_matches_bilinear_resize_everywhere(rng, factor, h, w):
    img = rng.normal(size=(h, w))
    kernel = Parameter(bilinear_kernel(factor)[None, None])
    out = upsample_scores(Tensor(img[None, None]), kernel, factor, h * factor, w * factor)
    np.testing.assert_allclose(out.data[0, 0], bilinear_resize(img, h * factor, w * factor),
                               rtol=0, atol=1e-10)


def test_upsample_rejects_unreachable_target():
    with pytest.raises(ShapeError, match="outside reachable range"):
        upsample_scores(Tensor(np.zeros((1, 1, 2, 2))), Parameter(bilinear_kernel(2)[None, None]), 2, 9, 4)


# --- cross-entropy --------------------------------------------------------------

def test_ce_uniform_scores_is_log_c():
    loss = cross_entropy_loss(Tensor(np.zeros((1, 5, 3, 3))), np.zeros((3, 3), dtype=int))
    assert loss.data == pytest.approx(math.log(5), abs=1e-14)


def test_ce_all_ignored_is_zero_with_zero_grad():
    s = Tensor(np.ones((1, 3, 2, 2)), requires_grad=True)
    with Graph() as g:
        loss = cross_entropy_loss(s, np.full((2, 2), 255))
    backward(loss, g)
    assert loss.data == 0.0
    np.testing.assert_array_equal(s.grad, 0.0)


def test_ce_matches_direct(rng):
    s = rng.normal(size=(1, 3, 2, 2))
    lab = np.array([[[0, 2], [255, 1]]])
    loss = cross_entropy_loss(Tensor(s), lab)
    assert float(loss.data) == pytest.approx(cross_entropy_direct(s, lab, 255), abs=1e-10)


def test_ce_rejects_out_of_range_label():
    with pytest.raises(ValueError, match="outside"):
        cross_entropy_loss(Tensor(np.zeros((1, 3, 1, 2))), np.array([[0, 3]]))


# --- backward ---------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    with Graph() as g:
        loss = tensor_sum(x)
    backward(loss, g)
    np.testing.assert_array_equal(x.grad, 1.0)


def test_backward_relu_negative_is_zero(rng):
    x = Tensor(-np.abs(rng.normal(size=(1, 2, 3, 3))) - 0.1, requires_grad=True)
    with Graph() as g:
        loss = tensor_sum(relu(x))
    backward(loss, g)
    np.testing.assert_array_equal(x.grad, 0.0)


def test_backward_rejects_non_scalar(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with Graph() as g:
        y = relu(x)
    with pytest.raises(ShapeError, match="scalar"):
        backward(y, g)


def test_composite_micro_net_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(1, 2, 6, 6)))
    w1 = Parameter(rng.normal(size=(4, 2, 3, 3)) * 0.5)
    b1 = Parameter(rng.normal(size=(1, 4, 1, 1)) * 0.1)
    w2 = Parameter(rng.normal(size=(3, 4, 1, 1)) * 0.5)
    labels = rng.integers(0, 3, size=(1, 3, 3))
    errs = check_gradients(
        lambda: cross_entropy_loss(conv2d(relu(conv2d(x, w1, b1, 2, 1)), w2), labels),
        [x, w1, b1, w2])
    assert max(errs) < 1e-3


def test_frozen_parameter_keeps_zero_gradient(rng):
    x = Tensor(rng.normal(size=(1, 1, 4, 4)))
    w = Parameter(rng.normal(size=(1, 1, 3, 3)), trainable=False)
    with Graph() as g:
        loss = tensor_sum(conv2d(x, w, pad=1))
    backward(loss, g)
    np.testing.assert_array_equal(w.grad, 0.0)
    assert not g.nodes  # nothing differentiable was recorded


def test_forward_backward_bit_identical_across_runs():
    def run():
        r = np.random.default_rng(7)
        x = Tensor(r.normal(size=(1, 3, 8, 8)))
        w = Parameter(r.normal(size=(4, 3, 3, 3)))
        k = Parameter(bilinear_kernel(2)[None, None].repeat(4, 0))
        with Graph() as g:
            s = upsample_scores(conv2d(x, w, stride=2, pad=1), k, 2, 8, 8)
            loss = cross_entropy_loss(s, r.integers(0, 4, size=(1, 8, 8)))
        backward(loss, g)
        return s.data.tobytes(), w.grad.tobytes(), k.grad.tobytes()
    assert run() == run()


# --- SGD ------------------------------------------------------------------------------

def test_sgd_cases():
    p = Parameter(np.full((1, 1, 1, 1), 1.0))
    p.grad[...] = 2.0
    sgd_step([p], 0.0)
    assert p.data.item() == 1.0 and p.grad.item() == 0.0
    p.grad[...] = 2.0
    sgd_step([p], 0.1)
    assert p.data.item() == pytest.approx(0.8, abs=1e-15)
    assert p.grad.item() == 0.0


def test_sgd_quadratic_step():
    x = Parameter(np.full((1, 1, 1, 1), 1.0))
    with Graph() as g:
        loss = tensor_sum(multiply(x, x))
    backward(loss, g)
    SGD([x], 0.25).step()
    assert x.data.item() == 0.5


# --- MAC counter and checkpoints -------------------------------------------------------

def test_mac_counter_on_1x1_conv():
    with MacCounter() as mc:
        conv2d(Tensor(np.zeros((1, 3, 5, 7))), Parameter(np.zeros((4, 3, 1, 1))))
    assert mc.total == 3 * 4 * 5 * 7


def test_checkpoint_roundtrip_bit_exact(rng, tmp_path):
    arrays = {"a.weight": rng.normal(size=(3, 2, 3, 3)), "ü.bias": rng.normal(size=(1, 3, 1, 1)),
              "empty": np.zeros((0, 1, 1, 1))}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, arrays, {"k": 1})
    back, manifest = checkpoint.load(path)
    assert manifest == {"k": 1}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    body = sum(4 + len(k.encode()) + 32 + 8 * v.size for k, v in arrays.items())
    assert path.stat().st_size == 8 + 4 + 4 + len(b'{"k": 1}') + 4 + body


def test_checkpoint_rejects_corruption(rng, tmp_path):
    buf = checkpoint.dumps({"w": rng.normal(size=(1, 1, 2, 2))})
    with pytest.raises(checkpoint.CheckpointError, match="magic"):
        checkpoint.loads(b"XXXX" + buf[4:])
    with pytest.raises(checkpoint.CheckpointError, match="truncated"):
        checkpoint.loads(buf[:-3])
    bad_version = buf[:8] + (99).to_bytes(4, "little") + buf[12:]
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(bad_version)
