import json

import numpy as np
import pytest

from core_math import PowerIterSettings, make_rng, materialize_operator, svd_oracle
from errors import ArchitectureError, CheckpointError, ShapeMismatchError
from layers import conv_operator
from losses import LossKind
from model import (
    CnnArch,
    FFArch,
    conv_operator_norm,
    forward,
    from_weights,
    init,
    input_jacobian,
    input_jacobians,
    layer_spectral_norms,
    load_checkpoint,
    loss_and_grads,
    param_distance,
    param_grad,
    params_of,
    save_checkpoint,
    with_params,
)

FF_TABLE = {16: 800, 32: 1600, 64: 3200, 80: 4000, 96: 4800, 128: 6400, 256: 12800,
            512: 25600, 1024: 51200, 131072: 6_553_600}
CNN_TABLE = {5: 9_985, 7: 19_271, 10: 38_870, 11: 46_915, 12: 55_716, 60: 1_367_220}


# ────────────────────────────────────────────────
# Архитектуры
# ────────────────────────────────────────────────

@pytest.mark.parametrize("width,count", FF_TABLE.items())
def test_ff_param_count(width, count):
    assert FFArch((width,)).param_count == count


@pytest.mark.parametrize("width,count", CNN_TABLE.items())
def test_cnn_param_count(width, count):
    arch = CnnArch(width)
    assert arch.param_count == count == 378 * width ** 2 + 107 * width


def test_cnn_final_spatial_extent_is_one():
    assert CnnArch(3).final_size == 1
    assert CnnArch(3).conv_input_sizes == [32, 32, 16, 8]


def test_zero_width_rejected():
    with pytest.raises(ArchitectureError):
        FFArch((16, 0))
    with pytest.raises(ArchitectureError):
        CnnArch(0)


def test_init_is_deterministic_per_seed():
    a = init(FFArch((16,), 8, 3), seed=4)
    b = init(FFArch((16,), 8, 3), seed=4)
    c = init(FFArch((16,), 8, 3), seed=5)
    assert np.array_equal(params_of(a), params_of(b))
    assert not np.array_equal(params_of(a), params_of(c))


def test_init_respects_fan_in_bound():
    net = init(FFArch((64,), 40, 10), seed=0)
    bound = np.sqrt(2.0 / 40) * np.sqrt(3.0)
    assert np.max(np.abs(net.weights[0])) <= bound


# ────────────────────────────────────────────────
# Прямой проход
# ────────────────────────────────────────────────

def test_zero_input_gives_zero_output(small_ff):
    assert not np.any(forward(small_ff, np.zeros(8)))


def test_outputs_are_nonnegative(small_ff):
    out = forward(small_ff, make_rng(1).standard_normal((20, 8)))
    assert out.shape == (20, 3)
    assert np.all(out >= 0)


def test_single_linear_layer_on_positive_inputs():
    w = np.array([[1.0, 0.5], [0.0, 2.0]])
    net = from_weights(FFArch((), 2, 2), [w])
    x = np.array([1.0, 3.0])
    assert np.allclose(forward(net, x), w @ x)


def test_hand_network():
    net = from_weights(FFArch((2,), 2, 1), [np.eye(2), np.array([[1.0, -1.0]])])
    assert forward(net, np.array([1.0, 2.0]))[0] == 0.0


def test_forward_rejects_wrong_dimension(small_ff):
    with pytest.raises(ShapeMismatchError):
        forward(small_ff, np.zeros(7))


def test_forward_is_bit_deterministic(small_ff):
    x = make_rng(2).standard_normal((5, 8))
    assert np.array_equal(forward(small_ff, x), forward(small_ff, x))


# ────────────────────────────────────────────────
# Градиенты и якобианы
# ────────────────────────────────────────────────

def kink_free_sample(net, rng, margin=1e-2, tries=200):
    """Вход, у которого все предактивации отстоят от нуля больше margin"""
    for _ in range(tries):
        x = rng.standard_normal((1, net.input_dim))
        _, (_, pres) = net.forward_cache(x)
        if all(np.min(np.abs(z)) > margin for z in pres):
            return x
    pytest.skip("не нашли вход вдали от изломов ReLU")


def fd_param_grad(net, x, labels, kind, coords, eps=1e-4):
    theta = params_of(net)
    out = []
    for c in coords:
        tp, tm = theta.copy(), theta.copy()
        tp[c] += eps
        tm[c] -= eps
        lp = loss_and_grads(with_params(net, tp), x, labels, kind)[0]
        lm = loss_and_grads(with_params(net, tm), x, labels, kind)[0]
        out.append((lp - lm) / (2 * eps))
    return np.array(out)


@pytest.mark.parametrize("kind", [LossKind.MSE, LossKind.CE])
def test_param_grad_matches_finite_differences_on_50_nets(kind):
    rng = make_rng(3)
    for case in range(50):
        net = init(FFArch((16,), 8, 3), seed=case)
        x = kink_free_sample(net, rng)
        labels = rng.integers(0, 3, size=1)
        grad = param_grad(net, x, labels, kind)
        coords = rng.choice(net.param_count, size=12, replace=False)
        assert np.allclose(grad[coords], fd_param_grad(net, x, labels, kind, coords), atol=1e-5)


def test_single_layer_mse_closed_form():
    rng = make_rng(4)
    w = rng.standard_normal((3, 5))
    net = from_weights(FFArch((), 5, 3), [w])
    x = rng.standard_normal((1, 5))
    labels = np.array([1])
    z = (w @ x[0])
    y = np.eye(3)[1]
    expected = (2.0 / 3) * ((np.maximum(z, 0) - y) * (z > 0))[:, None] * x[0][None, :]
    assert np.allclose(param_grad(net, x, labels, "mse").reshape(3, 5), expected, atol=1e-12)


def test_zero_weights_give_zero_last_layer_grad():
    arch = FFArch((4,), 3, 2)
    net = from_weights(arch, [np.zeros(s) for s in arch.layer_shapes])
    _, grads = loss_and_grads(net, np.ones((2, 3)), np.array([0, 1]), "mse")
    assert not np.any(grads[-1])


def test_input_jacobian_matches_finite_differences():
    rng = make_rng(5)
    net = init(FFArch((16,), 8, 3), seed=5)
    x = kink_free_sample(net, rng)[0]
    jac = input_jacobian(net, x)
    eps = 1e-6
    fd = np.empty_like(jac)
    for j in range(8):
        e = np.zeros(8)
        e[j] = eps
        fd[:, j] = (forward(net, x + e) - forward(net, x - e)) / (2 * eps)
    assert np.allclose(jac, fd, atol=1e-5)


def test_euler_identity(small_ff):
    x = make_rng(6).standard_normal(8)
    assert np.allclose(input_jacobian(small_ff, x) @ x, forward(small_ff, x), atol=1e-9)


def test_jacobian_at_zero_is_zero(small_ff):
    assert not np.any(input_jacobian(small_ff, np.zeros(8)))


def test_single_layer_jacobian_is_w_on_active_inputs():
    w = np.abs(make_rng(7).standard_normal((3, 4)))
    net = from_weights(FFArch((), 4, 3), [w])
    assert np.array_equal(input_jacobian(net, np.ones(4)), w)


def test_batched_jacobians_match_single(small_ff):
    xs = make_rng(8).standard_normal((7, 8))
    batch = input_jacobians(small_ff, xs, chunk=3)
    for x, j in zip(xs, batch):
        assert np.allclose(input_jacobian(small_ff, x), j, atol=1e-14)


def small_cnn():
    return init(CnnArch(1, in_channels=1, image_size=8, output_dim=3, pools=(1, 2, 2, 2)), seed=0)


def test_cnn_accepts_flat_and_image_inputs():
    net = small_cnn()
    x = make_rng(9).standard_normal((2, 64))
    assert np.array_equal(forward(net, x), forward(net, x.reshape(2, 1, 8, 8)))


def test_cnn_jacobian_matches_finite_differences():
    net = small_cnn()
    x = make_rng(10).standard_normal(64)
    jac = input_jacobian(net, x)
    eps = 1e-6
    for j in (0, 17, 40, 63):
        e = np.zeros(64)
        e[j] = eps
        fd = (forward(net, x + e) - forward(net, x - e)) / (2 * eps)
        assert np.allclose(jac[:, j], fd, atol=1e-5)


def test_cnn_param_grad_matches_finite_differences():
    net = small_cnn()
    rng = make_rng(11)
    x = rng.standard_normal((2, 64))
    labels = np.array([0, 2])
    grad = param_grad(net, x, labels, "ce")
    coords = rng.choice(net.param_count, size=10, replace=False)
    assert np.allclose(grad[coords], fd_param_grad(net, x, labels, "ce", coords, eps=1e-6), atol=1e-5)


# ────────────────────────────────────────────────
# Нормы слоёв
# ────────────────────────────────────────────────

def test_layer_norms_of_scaled_identities():
    net = from_weights(FFArch((3,), 3, 3), [2 * np.eye(3), 3 * np.eye(3)])
    assert layer_spectral_norms(net) == pytest.approx([2.0, 3.0], rel=1e-12)


def test_layer_norms_match_oracle_at_width_256():
    net = init(FFArch((256,), 40, 10), seed=0)
    norms = layer_spectral_norms(net)
    for n, w in zip(norms, net.weights):
        assert n == pytest.approx(svd_oracle(w), rel=1e-6)


def test_cnn_conv_norm_matches_materialized_crop():
    net = init(CnnArch(7), seed=0)
    kernel = net.weights[0]
    tight = PowerIterSettings(max_iters=50_000, rel_tol=1e-14)
    op = conv_operator(kernel, 8)
    mat = materialize_operator(op.apply, op.in_shape, op.out_shape)
    assert conv_operator_norm(kernel, 8, tight) == pytest.approx(svd_oracle(mat), rel=1e-6)


# ────────────────────────────────────────────────
# θ и чекпоинты
# ────────────────────────────────────────────────

def test_param_distance(small_ff):
    theta0 = params_of(small_ff)
    assert param_distance(small_ff, theta0) == 0.0
    theta = theta0.copy()
    theta[5] += 3.0
    assert param_distance(with_params(small_ff, theta), theta0) == pytest.approx(3.0, abs=1e-12)
    with pytest.raises(ShapeMismatchError):
        param_distance(small_ff, theta0[:-1])


def test_checkpoint_round_trip(tmp_path, small_ff):
    path = save_checkpoint(small_ff, tmp_path / "c.json", epoch=12, meta={"note": "x"})
    ckpt = load_checkpoint(path)
    assert ckpt.epoch == 12 and ckpt.seed == small_ff.seed and ckpt.meta == {"note": "x"}
    assert ckpt.net.arch == small_ff.arch
    for a, b in zip(ckpt.net.weights, small_ff.weights):
        assert np.array_equal(a, b)


def test_checkpoint_rejects_foreign_format(tmp_path, small_ff):
    path = save_checkpoint(small_ff, tmp_path / "c.json", epoch=0)
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload["format"] = "other"
    path.write_text(json.dumps(payload), encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("not json", encoding="utf-8")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
