import math

import numpy as np
import pytest

from errors import LabelRangeError, UnknownLossError
from losses import LossKind, loss_and_output_grad, one_hot, parse_loss_kind, softmax


def test_parse_loss_kind():
    assert parse_loss_kind("CE") is LossKind.CE
    assert parse_loss_kind(LossKind.MSE) is LossKind.MSE
    with pytest.raises(UnknownLossError):
        parse_loss_kind("hinge")


def test_perfect_prediction_mse_is_zero():
    labels = np.array([0, 2, 1])
    loss, grad = loss_and_output_grad(one_hot(labels, 3), labels, "mse")
    assert loss == 0.0
    assert not np.any(grad)


def test_uniform_logits_ce_is_log_k():
    loss, _ = loss_and_output_grad(np.zeros((4, 10)), np.array([0, 3, 7, 9]), "ce")
    assert loss == pytest.approx(math.log(10), rel=1e-12)


def test_mse_reductions_differ_by_class_count():
    out = np.array([[0.5, 0.2, 0.1]])
    labels = np.array([1])
    mean_loss, mean_grad = loss_and_output_grad(out, labels, "mse", "mean")
    sum_loss, sum_grad = loss_and_output_grad(out, labels, "mse", "sum")
    assert sum_loss == pytest.approx(3 * mean_loss, rel=1e-12)
    assert np.allclose(sum_grad, 3 * mean_grad)


@pytest.mark.parametrize("kind", ["mse", "ce"])
def test_output_grad_matches_finite_differences(kind):
    rng = np.random.default_rng(0)
    out = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, size=5)
    _, grad = loss_and_output_grad(out, labels, kind)
    eps = 1e-6
    for i, j in [(0, 0), (2, 3), (4, 1)]:
        op, om = out.copy(), out.copy()
        op[i, j] += eps
        om[i, j] -= eps
        fd = (loss_and_output_grad(op, labels, kind)[0] - loss_and_output_grad(om, labels, kind)[0]) / (2 * eps)
        assert grad[i, j] == pytest.approx(fd, abs=1e-8)


def test_label_out_of_range():
    with pytest.raises(LabelRangeError):
        loss_and_output_grad(np.zeros((2, 3)), np.array([0, 3]), "ce")
    with pytest.raises(LabelRangeError):
        loss_and_output_grad(np.zeros((2, 3)), np.array([-1, 0]), "mse")


def test_softmax_rows_sum_to_one():
    p = softmax(np.array([[1.0, 2.0, 3.0], [1000.0, 0.0, -1000.0]]))
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.all(np.isfinite(p))
