"""
losses.py — функции потерь и их градиенты по выходу сети.

MSE сравнивает выход с one-hot вектором; CE применяет log-softmax к выходу
сети (после завершающего ReLU, как в определении модели).
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from errors import LabelRangeError, ShapeMismatchError, UnknownLossError


class LossKind(str, Enum):
    MSE = "mse"
    CE = "ce"


REDUCTIONS = ("mean", "sum")


def parse_loss_kind(value) -> LossKind:
    if isinstance(value, LossKind):
        return value
    try:
        return LossKind(str(value).strip().lower())
    except ValueError:
        raise UnknownLossError(f"неизвестный вид loss: {value!r} (ожидалось mse | ce)") from None


def check_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeMismatchError(f"метки должны быть 1-D, shape={labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = int(np.flatnonzero((labels < 0) | (labels >= num_classes))[0])
        raise LabelRangeError(
            f"метка {int(labels[bad])} (позиция {bad}) вне диапазона [0, {num_classes})"
        )
    return labels.astype(np.int64, copy=False)


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = check_labels(labels, num_classes)
    y = np.zeros((labels.size, num_classes), dtype=np.float64)
    y[np.arange(labels.size), labels] = 1.0
    return y


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(z))


def loss_and_output_grad(out: np.ndarray, labels: np.ndarray, kind: LossKind | str,
                         reduction: str = "mean") -> tuple[float, np.ndarray]:
    """
    Средний по батчу loss и его градиент по выходу сети (N × K).

    reduction (только для MSE, в конфиге train.mse_reduction):
        mean — по умолчанию; среднее по батчу и по классам: 2/(N·K)·(f − y).
               Это квадрат 2-нормы на объект, делённый ещё и на K, поэтому loss
               и градиент в K раз меньше, чем у sum.
        sum  — квадрат 2-нормы на объект, среднее по батчу: 2/N·(f − y)
    Величины bias-variance от reduction не зависят: там всегда квадраты 2-норм.
    """
    kind = parse_loss_kind(kind)
    if out.ndim != 2 or out.shape[0] != np.asarray(labels).shape[0]:
        raise ShapeMismatchError(f"выход {out.shape} и метки {np.shape(labels)} не согласованы")
    if out.shape[0] == 0:
        raise ShapeMismatchError("пустой батч")
    n, k = out.shape

    if kind is LossKind.MSE:
        if reduction not in REDUCTIONS:
            raise ValueError(f"reduction должен быть одним из {REDUCTIONS}, получено {reduction!r}")
        diff = out - one_hot(labels, k)
        if reduction == "mean":
            return float(np.mean(diff * diff)), (2.0 / (n * k)) * diff
        return float(np.sum(diff * diff) / n), (2.0 / n) * diff

    labels = check_labels(labels, k)
    logp = log_softmax(out)
    loss = -float(np.mean(logp[np.arange(n), labels]))
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def predictions(out: np.ndarray) -> np.ndarray:
    return np.argmax(out, axis=1)
