"""
Tests for the tensor core
=========================

Convolution variants against a direct sliding-window oracle, the gradient
tape, and reverse-mode gradients against central differences for every op.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colora.tensor import (
    ConvKernel,
    GradTape,
    Tensor,
    add,
    affine,
    backward,
    bias_add,
    conv,
    conv1d,
    conv2d,
    conv3d,
    dense,
    depthwise_conv,
    depthwise_conv2d,
    finite_diff_grad,
    flatten,
    global_avg_pool,
    linear,
    max_pool2d,
    mul,
    no_grad,
    pointwise_conv2d,
    relu,
    separable_delta_conv,
    softmax_cross_entropy,
    tensor_sum,
)


def naive_conv2d(x, w, b=None, padding="same", stride=1):
    """Direct sliding-window sum, one output element at a time."""
    H, W, C = x.shape
    h, k, _, T = w.shape
    if padding == "same":
        top, left = h // 2, k // 2
        xp = np.zeros((H + h - 1, W + k - 1, C))
        xp[top:top + H, left:left + W] = x
    else:
        xp = x.astype(np.float64)
    Ho = (xp.shape[0] - h) // stride + 1
    Wo = (xp.shape[1] - k) // stride + 1
    out = np.zeros((Ho, Wo, T))
    for i in range(Ho):
        for j in range(Wo):
            for t in range(T):
                patch = xp[i * stride:i * stride + h, j * stride:j * stride + k]
                out[i, j, t] = np.sum(patch * w[..., t]) + (0 if b is None else b[t])
    return out


# =============================================================================
# Tensor
# =============================================================================

def test_tensor_is_float32_copy():
    src = np.arange(6, dtype=np.float64).reshape(2, 3)
    t = Tensor(src)
    assert t.data.dtype == np.float32 and t.shape == (2, 3) and t.size == 6
    src[0, 0] = 99
    assert t.data[0, 0] == 0


@pytest.mark.parametrize("bad", [[1.0, np.nan], [np.inf], [[-np.inf, 0.0]]])
def test_tensor_rejects_nonfinite(bad):
    with pytest.raises(ValueError):
        Tensor(bad)


def test_tensor_rejects_zero_extent():
    with pytest.raises(ValueError):
        Tensor(np.zeros((0, 3)))


def test_conv_kernel_shapes():
    k = ConvKernel(Tensor(np.zeros((3, 5, 2, 4))), Tensor(np.zeros(4)))
    assert k.spatial == (3, 5) and k.in_channels == 2 and k.out_channels == 4
    with pytest.raises(ValueError):
        ConvKernel(Tensor(np.zeros((3, 3, 2, 4))), Tensor(np.zeros(3)))


# =============================================================================
# Conv2d
# =============================================================================

def test_conv2d_identity_1x1():
    x = Tensor([[[5.0]]])
    k = ConvKernel(Tensor(np.ones((1, 1, 1, 1))))
    assert conv2d(x, k).data.tolist() == [[[5.0]]]


def test_conv2d_zero_kernel(rng):
    x = Tensor(rng.normal(size=(5, 4, 3)))
    out = conv2d(x, ConvKernel(Tensor(np.zeros((3, 3, 3, 2)))))
    assert out.shape == (5, 4, 2) and not out.data.any()


def test_conv2d_hand_example():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[..., None])
    w = np.array([[1.0, 0.0], [0.0, 1.0]])[..., None, None]
    out = conv2d(x, ConvKernel(Tensor(w)), padding="valid")
    assert out.shape == (1, 1, 1) and out.data.item() == 5.0


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
@pytest.mark.parametrize("ksize", [(1, 1), (3, 3), (2, 3), (4, 2)])
def test_conv2d_matches_naive(rng, padding, stride, ksize):
    x = rng.normal(size=(7, 6, 3))
    w = rng.normal(size=ksize + (3, 2))
    b = rng.normal(size=2)
    got = conv2d(Tensor(x), ConvKernel(Tensor(w), Tensor(b)), padding=padding, stride=stride).data
    want = naive_conv2d(x.astype(np.float32), w.astype(np.float32), b.astype(np.float32), padding, stride)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)


def test_same_padding_preserves_size_and_valid_shrinks(rng):
    x = Tensor(rng.normal(size=(2, 9, 8, 3)))
    k = ConvKernel(Tensor(rng.normal(size=(3, 5, 3, 4))))
    assert conv2d(x, k).shape == (2, 9, 8, 4)
    assert conv2d(x, k, padding="valid").shape == (2, 7, 4, 4)


def test_conv2d_errors(rng):
    k = ConvKernel(Tensor(rng.normal(size=(3, 3, 2, 1))))
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(rng.normal(size=(4, 4, 3))), k)
    with pytest.raises(ValueError, match="larger"):
        conv2d(Tensor(rng.normal(size=(2, 2, 2))), k, padding="valid")
    with pytest.raises(ValueError):
        conv2d(Tensor(rng.normal(size=(4, 4, 2))), k, padding="reflect")
    with pytest.raises(ValueError, match="2D"):
        conv2d(Tensor(rng.normal(size=(4, 4, 2))), ConvKernel(Tensor(rng.normal(size=(3, 2, 1)))))


def test_conv1d_and_conv3d_shapes(rng):
    y1 = conv1d(Tensor(rng.normal(size=(10, 2))), ConvKernel(Tensor(rng.normal(size=(3, 2, 5)))))
    assert y1.shape == (10, 5)
    y3 = conv3d(Tensor(rng.normal(size=(4, 5, 6, 2))), ConvKernel(Tensor(rng.normal(size=(3, 3, 3, 2, 1)))),
                padding="valid")
    assert y3.shape == (2, 3, 4, 1)


def test_conv1d_matches_numpy_correlate(rng):
    x = rng.normal(size=12).astype(np.float32)
    w = rng.normal(size=3).astype(np.float32)
    got = conv1d(Tensor(x[:, None]), ConvKernel(Tensor(w[:, None, None])), padding="valid").data[:, 0]
    np.testing.assert_allclose(got, np.correlate(x, w, mode="valid"), rtol=1e-5, atol=1e-6)


def test_conv_is_linear_in_kernel(rng):
    x = Tensor(rng.normal(size=(2, 6, 6, 3)))
    k1, k2 = rng.normal(size=(2, 3, 3, 3, 4))
    a, b = 0.7, -1.3
    lhs = conv(x, Tensor(a * k1 + b * k2)).data.astype(np.float64)
    rhs = a * conv(x, Tensor(k1)).data.astype(np.float64) + b * conv(x, Tensor(k2)).data
    np.testing.assert_allclose(lhs, rhs, atol=1e-6 * np.abs(rhs).max() * 10)


# =============================================================================
# Depthwise / pointwise
# =============================================================================

def test_depthwise_ones_1x1_is_identity(rng):
    x = Tensor(rng.normal(size=(5, 5, 3)))
    np.testing.assert_array_equal(depthwise_conv2d(x, Tensor(np.ones((1, 1, 3)))).data, x.data)


def test_depthwise_zero_kernel(rng):
    x = Tensor(rng.normal(size=(5, 5, 3)))
    assert not depthwise_conv2d(x, Tensor(np.zeros((3, 3, 3)))).data.any()


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
def test_depthwise_equals_per_channel_conv(rng, padding, stride):
    x = rng.normal(size=(3, 3, 2))
    kd = rng.normal(size=(3, 3, 2))
    got = depthwise_conv2d(Tensor(x), Tensor(kd), padding=padding, stride=stride).data
    for g in range(2):
        single = conv2d(Tensor(x[..., g:g + 1]), ConvKernel(Tensor(kd[..., g, None, None])),
                        padding=padding, stride=stride).data
        np.testing.assert_allclose(got[..., g], single[..., 0], rtol=1e-6, atol=1e-6)


def test_depthwise_channels_are_independent(rng):
    x = rng.normal(size=(6, 6, 3))
    kd = Tensor(rng.normal(size=(3, 3, 3)))
    base = depthwise_conv2d(Tensor(x), kd).data
    x[..., 1] += 10.0
    bumped = depthwise_conv2d(Tensor(x), kd).data
    np.testing.assert_array_equal(base[..., [0, 2]], bumped[..., [0, 2]])


def test_depthwise_1d_and_3d_fallback(rng):
    x1 = rng.normal(size=(9, 2))
    w1 = rng.normal(size=(3, 2))
    got = depthwise_conv(Tensor(x1), Tensor(w1), padding="valid").data
    for g in range(2):
        np.testing.assert_allclose(got[:, g], np.correlate(x1[:, g].astype(np.float32),
                                                           w1[:, g].astype(np.float32), "valid"), rtol=1e-5)
    assert depthwise_conv(Tensor(rng.normal(size=(4, 4, 4, 2))), Tensor(rng.normal(size=(3, 3, 3, 2)))).shape \
        == (4, 4, 4, 2)


def test_depthwise_errors(rng):
    with pytest.raises(ValueError):
        depthwise_conv2d(Tensor(rng.normal(size=(4, 4, 3))), Tensor(rng.normal(size=(3, 3, 2))))
    with pytest.raises(ValueError):
        depthwise_conv2d(Tensor(rng.normal(size=(4, 4, 3))), Tensor(rng.normal(size=(3, 3))))


def test_pointwise_dot_product_example():
    x = Tensor(np.tile([3.0, 4.0], (2, 3, 1)))
    out = pointwise_conv2d(x, Tensor([[1.0], [2.0]]))
    assert out.shape == (2, 3, 1) and np.all(out.data == 11.0)


def test_pointwise_identity_and_zero(rng):
    x = Tensor(rng.normal(size=(4, 4, 3)))
    np.testing.assert_array_equal(pointwise_conv2d(x, Tensor(np.eye(3))).data, x.data)
    assert not pointwise_conv2d(x, Tensor(np.zeros((3, 5)))).data.any()
    with pytest.raises(ValueError):
        pointwise_conv2d(x, Tensor(np.zeros((2, 5))))


def test_1x1_conv_equals_pointwise_exactly(rng):
    x = Tensor(rng.normal(size=(2, 5, 5, 3)))
    kp = rng.normal(size=(3, 4))
    a = conv2d(x, ConvKernel(Tensor(kp[None, None]))).data
    b = pointwise_conv2d(x, Tensor(kp)).data
    np.testing.assert_array_equal(a, b)


def test_dw_then_pw_equals_composed_dense(rng):
    x = Tensor(rng.normal(size=(2, 6, 6, 3)))
    kd = rng.normal(size=(3, 3, 3)).astype(np.float32)
    kp = rng.normal(size=(3, 4)).astype(np.float32)
    chained = pointwise_conv2d(depthwise_conv2d(x, Tensor(kd)), Tensor(kp)).data.astype(np.float64)
    dense_k = kd[..., :, None].astype(np.float64) * kp
    direct = conv2d(x, ConvKernel(Tensor(dense_k))).data.astype(np.float64)
    assert np.linalg.norm(chained - direct) / np.linalg.norm(direct) <= 1e-5


# =============================================================================
# Tape
# =============================================================================

def test_backward_sum_of_scalar():
    w = Tensor(2.5, requires_grad=True, name="w")
    with GradTape() as tape:
        loss = tensor_sum(w)
    assert backward(tape, loss) == {"w": pytest.approx(1.0)}


def test_backward_conv_kernel_grad_is_correlation_with_ones(rng):
    x = rng.normal(size=(5, 5, 2))
    w = Tensor(rng.normal(size=(3, 3, 2, 1)), requires_grad=True, name="k")
    with GradTape() as tape:
        loss = tensor_sum(conv2d(Tensor(x), ConvKernel(w), padding="valid"))
    grad = backward(tape, loss)["k"]
    want = np.zeros((3, 3, 2, 1))
    for a in range(3):
        for b in range(3):
            want[a, b, :, 0] = x[a:a + 3, b:b + 3].astype(np.float32).sum(axis=(0, 1))
    np.testing.assert_allclose(grad, want, rtol=1e-5)
    num = finite_diff_grad(lambda k: float(conv2d(Tensor(x), ConvKernel(Tensor(k)), padding="valid")
                                           .data.astype(np.float64).sum()), w)
    np.testing.assert_allclose(grad, num, rtol=1e-3, atol=1e-3)


def test_frozen_tensor_absent_from_gradients(rng):
    x = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True, name="x")
    frozen = Tensor(rng.normal(size=(3, 3, 2, 2)), name="frozen")
    with GradTape() as tape:
        loss = tensor_sum(conv2d(x, ConvKernel(frozen)))
    grads = backward(tape, loss)
    assert set(grads) == {"x"}


def test_backward_errors(rng):
    w = Tensor(rng.normal(size=3), requires_grad=True)
    with GradTape() as tape:
        vec = mul(w, w)
    with pytest.raises(ValueError, match="scalar"):
        backward(tape, vec)
    with pytest.raises(ValueError, match="not produced"):
        backward(tape, Tensor(1.0))


def test_no_grad_records_nothing(rng):
    w = Tensor(rng.normal(size=3), requires_grad=True)
    with GradTape() as tape:
        with no_grad():
            tensor_sum(mul(w, w))
    assert len(tape) == 0


def test_gradients_accumulate_over_reuse():
    w = Tensor([1.0, -2.0], requires_grad=True, name="w")
    with GradTape() as tape:
        loss = tensor_sum(add(mul(w, w), w))
    np.testing.assert_allclose(backward(tape, loss)["w"], [3.0, -3.0])


# =============================================================================
# Finite differences
# =============================================================================

def test_finite_diff_examples(rng):
    x = rng.normal(size=(3, 2))
    np.testing.assert_allclose(finite_diff_grad(np.sum, x), np.ones_like(x), atol=1e-9)
    np.testing.assert_allclose(finite_diff_grad(lambda v: np.sum(v ** 2), np.array([1.0, 2.0])), [2, 4], atol=1e-4)
    np.testing.assert_allclose(finite_diff_grad(lambda v: 3.0, x), 0.0, atol=1e-12)


def test_finite_diff_errors():
    with pytest.raises(ValueError):
        finite_diff_grad(np.sum, np.ones(2), eps=0)
    with pytest.raises(ValueError):
        finite_diff_grad(lambda v: np.inf, np.ones(2))


# =============================================================================
# Gradient checks on every op
# =============================================================================

def _check(build, shapes, rng, rtol=1e-3):
    """Reverse-mode vs central differences for ``build(*tensors) -> scalar``."""
    values = [rng.normal(size=s) for s in shapes]
    tensors = [Tensor(v, requires_grad=True, name=f"p{i}") for i, v in enumerate(values)]
    with GradTape() as tape:
        loss = build(*tensors)
    grads = backward(tape, loss)
    for i, v in enumerate(values):
        def f(arr, i=i):
            args = [Tensor(arr) if j == i else Tensor(values[j]) for j in range(len(values))]
            return float(build(*args).data)
        num = finite_diff_grad(f, tensors[i])
        err = np.abs(grads[f"p{i}"] - num).max() / max(np.abs(num).max(), 1e-3)
        assert err <= rtol, f"input {i}: relative error {err:.2e}"


def _weighted(y, seed=0):
    # a fixed random projection avoids the degenerate all-ones cotangent
    w = np.random.default_rng(seed).normal(size=y.shape)
    return tensor_sum(mul(y, Tensor(w)))


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
def test_grad_conv2d(rng, padding, stride):
    _check(lambda x, w, b: _weighted(conv2d(x, ConvKernel(w, b), padding=padding, stride=stride)),
           [(4, 4, 3), (3, 3, 3, 2), (2,)], rng)


@pytest.mark.parametrize("padding", ["same", "valid"])
@pytest.mark.parametrize("stride", [1, 2])
def test_grad_depthwise(rng, padding, stride):
    _check(lambda x, w: _weighted(depthwise_conv2d(x, w, padding=padding, stride=stride)),
           [(4, 4, 3), (3, 3, 3)], rng)


def test_grad_depthwise_1d(rng):
    _check(lambda x, w: _weighted(depthwise_conv(x, w)), [(4, 3), (3, 3)], rng)


def test_grad_pointwise(rng):
    _check(lambda x, w: _weighted(pointwise_conv2d(x, w)), [(4, 4, 3), (3, 2)], rng)


# (3, 2) takes the dense weight-gradient route, (6, 5) the factor route
@pytest.mark.parametrize("channels", [(3, 2), (6, 5)])
@pytest.mark.parametrize("pw_first", [True, False])
@pytest.mark.parametrize("stride", [1, 2])
def test_grad_separable_delta_conv(rng, channels, pw_first, stride):
    C, T = channels
    base = ConvKernel(Tensor(rng.normal(size=(3, 3, C, T))), Tensor(rng.normal(size=T)))
    groups = T if pw_first else C
    _check(lambda x, kp, kd: _weighted(separable_delta_conv(x, base.weights, base.bias, kp, kd,
                                                            pw_first=pw_first, stride=stride)),
           [(4, 4, C), (C, T), (3, 3, groups)], rng)


@pytest.mark.parametrize("pw_first", [True, False])
def test_grad_separable_delta_conv_bias_delta(rng, pw_first):
    base = ConvKernel(Tensor(rng.normal(size=(3, 3, 4, 5))), Tensor(rng.normal(size=5)))
    _check(lambda x, kp, kd, db: _weighted(separable_delta_conv(x, base.weights, base.bias, kp, kd,
                                                                pw_first=pw_first, bias_delta=db)),
           [(4, 4, 4), (4, 5), (3, 3, 5 if pw_first else 4), (5,)], rng)


def test_separable_delta_conv_requires_frozen_base(rng):
    w = Tensor(rng.normal(size=(3, 3, 2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="frozen"):
        separable_delta_conv(Tensor(rng.normal(size=(4, 4, 2))), w, None,
                             Tensor(np.zeros((2, 2))), Tensor(np.zeros((3, 3, 2))))


def test_grad_elementwise_ops(rng):
    _check(lambda a, b: _weighted(add(a, b)), [(3, 4), (4,)], rng)
    _check(lambda a, b: _weighted(mul(a, b)), [(3, 4), (3, 4)], rng)
    _check(lambda a, b: _weighted(bias_add(a, b)), [(2, 3, 4), (4,)], rng)
    _check(lambda a, s, t: _weighted(affine(a, s, t)), [(2, 3, 4), (), ()], rng)


def test_grad_relu_away_from_kink(rng):
    x = rng.normal(size=(3, 4))
    x[np.abs(x) < 0.05] = 0.3
    t = Tensor(x, requires_grad=True, name="x")
    with GradTape() as tape:
        loss = _weighted(relu(t))
    g = backward(tape, loss)["x"]
    w = np.random.default_rng(0).normal(size=x.shape)
    np.testing.assert_allclose(g, w * (x > 0), rtol=1e-6)


def test_grad_pooling_and_reshape(rng):
    _check(lambda x: _weighted(max_pool2d(x)), [(2, 4, 4, 3)], rng)
    _check(lambda x: _weighted(global_avg_pool(x)), [(2, 4, 4, 3)], rng)
    _check(lambda x: _weighted(flatten(x)), [(2, 2, 2, 3)], rng)


def test_grad_dense_linear_and_loss(rng):
    _check(lambda x, w, b: _weighted(dense(x, w, b)), [(3, 4), (4, 2), (2,)], rng)
    _check(lambda x, w: _weighted(linear(x, w)), [(3, 4), (2, 4)], rng)
    labels = [0, 2, 1]
    _check(lambda z: softmax_cross_entropy(z, labels), [(3, 4)], rng)


def test_max_pool_values():
    x = np.arange(16, dtype=np.float32).reshape(1, 4, 4, 1)
    np.testing.assert_array_equal(max_pool2d(Tensor(x)).data[0, ..., 0], [[5, 7], [13, 15]])


def test_cross_entropy_uniform_logits():
    loss = softmax_cross_entropy(Tensor(np.zeros((5, 4))), [0, 1, 2, 3, 0])
    assert loss.data == pytest.approx(np.log(4), rel=1e-6)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), C=st.integers(1, 3), T=st.integers(1, 3),
       H=st.integers(4, 7), W=st.integers(4, 7), seed=st.integers(0, 2**16))
def test_property_conv_matches_naive(h, w, C, T, H, W, seed):
    r = np.random.default_rng(seed)
    x = r.normal(size=(H, W, C)).astype(np.float32)
    k = r.normal(size=(h, w, C, T)).astype(np.float32)
    got = conv2d(Tensor(x), ConvKernel(Tensor(k))).data
    np.testing.assert_allclose(got, naive_conv2d(x, k), rtol=1e-5, atol=1e-5)


@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 3), w=st.integers(1, 3), C=st.integers(1, 3), T=st.integers(1, 3),
       stride=st.integers(1, 2), seed=st.integers(0, 2**16))
def test_property_conv_input_gradient(h, w, C, T, stride, seed):
    r = np.random.default_rng(seed)
    x = Tensor(r.normal(size=(4, 4, C)), requires_grad=True, name="x")
    k = Tensor(r.normal(size=(h, w, C, T)))
    proj = r.normal(size=conv2d(x, ConvKernel(k), stride=stride).shape)
    with GradTape() as tape:
        loss = tensor_sum(mul(conv2d(x, ConvKernel(k), stride=stride), Tensor(proj)))
    g = backward(tape, loss)["x"]
    num = finite_diff_grad(lambda a: float((conv2d(Tensor(a), ConvKernel(k), stride=stride).data
                                            .astype(np.float64) * proj.astype(np.float32)).sum()), x)
    assert np.abs(g - num).max() <= 1e-3 * max(np.abs(num).max(), 1.0)
