import numpy as np
import pytest

from core_math import make_rng
from errors import ShapeMismatchError
from layers import (
    conv2d,
    conv2d_adjoint,
    conv2d_weight_grad,
    conv_operator,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_mask,
)


def naive_conv(x, kernel, padding):
    n, c_in, h, w = x.shape
    c_out, _, k, _ = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho, wo = h + 2 * padding - k + 1, w + 2 * padding - k + 1
    out = np.zeros((n, c_out, ho, wo))
    for b in range(n):
        for o in range(c_out):
            for i in range(ho):
                for j in range(wo):
                    out[b, o, i, j] = np.sum(xp[b, :, i:i + k, j:j + k] * kernel[o])
    return out


def test_relu_mask_is_zero_at_kink():
    z = np.array([-1.0, 0.0, 2.0])
    assert np.array_equal(relu(z), [0.0, 0.0, 2.0])
    assert np.array_equal(relu_mask(z), [0.0, 0.0, 1.0])


@pytest.mark.parametrize("padding", [0, 1])
def test_conv_matches_naive_loops(padding):
    rng = make_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    kernel = rng.standard_normal((4, 3, 3, 3))
    assert np.allclose(conv2d(x, kernel, padding), naive_conv(x, kernel, padding), atol=1e-12)


def test_conv_rejects_channel_mismatch():
    with pytest.raises(ShapeMismatchError):
        conv2d(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))


def test_adjoint_inner_product_identity():
    rng = make_rng(2)
    kernel = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((1, 2, 5, 5))
    g = rng.standard_normal((1, 3, 5, 5))
    lhs = np.vdot(conv2d(x, kernel, 1), g)
    rhs = np.vdot(x, conv2d_adjoint(g, kernel, 1))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_weight_grad_matches_finite_differences():
    rng = make_rng(3)
    x = rng.standard_normal((2, 2, 4, 4))
    kernel = rng.standard_normal((2, 2, 3, 3))
    g = rng.standard_normal((2, 2, 4, 4))
    grad = conv2d_weight_grad(x, g, 3, 1)
    eps = 1e-6
    for idx in [(0, 0, 0, 0), (1, 1, 2, 1), (0, 1, 1, 2)]:
        kp, km = kernel.copy(), kernel.copy()
        kp[idx] += eps
        km[idx] -= eps
        fd = (np.vdot(conv2d(x, kp, 1), g) - np.vdot(conv2d(x, km, 1), g)) / (2 * eps)
        assert grad[idx] == pytest.approx(fd, abs=1e-6)


def test_maxpool_picks_first_maximum_on_ties():
    x = np.ones((1, 1, 2, 2))
    out, idx = maxpool2d(x, 2)
    assert out.shape == (1, 1, 1, 1)
    back = maxpool2d_backward(np.ones((1, 1, 1, 1)), idx, 2, x.shape)
    assert np.array_equal(back[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_size_one_is_identity():
    x = make_rng(4).standard_normal((1, 2, 3, 3))
    out, idx = maxpool2d(x, 1)
    assert out is x and idx is None


def test_maxpool_values_and_routing():
    x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
    out, idx = maxpool2d(x, 2)
    assert np.array_equal(out[0, 0], [[5.0, 7.0], [13.0, 15.0]])
    back = maxpool2d_backward(np.ones_like(out), idx, 2, x.shape)
    assert back.sum() == 4.0
    assert back[0, 0, 1, 1] == 1.0 and back[0, 0, 3, 3] == 1.0


def test_conv_operator_shapes():
    op = conv_operator(np.zeros((4, 2, 3, 3)), spatial=8)
    assert op.in_shape == (2, 8, 8)
    assert op.out_shape == (4, 8, 8)
    assert op.apply(np.zeros(op.in_shape)).shape == op.out_shape
