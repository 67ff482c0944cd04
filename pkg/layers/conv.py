"""
Свёртка в соглашении cross-correlation (как в torch.nn.Conv2d), без bias.

Формы:
    x       — (N, C_in, H, W)
    kernel  — (C_out, C_in, k, k)
    выход   — (N, C_out, H + 2p - k + 1, W + 2p - k + 1)

Сопряжённый к x → conv2d(x, K, p) оператор — свёртка с развёрнутым на 180°
ядром, у которого переставлены каналы, и паддингом k - 1 - p.
"""

from __future__ import annotations

from typing import Callable, NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeMismatchError


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def relu_mask(z: np.ndarray) -> np.ndarray:
    """Производная ReLU; в точке 0 равна 0"""
    return (z > 0.0).astype(np.float64)


# ────────────────────────────────────────────────
# Свёртка
# ────────────────────────────────────────────────

def _windows(x: np.ndarray, k: int, padding: int) -> np.ndarray:
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # (N, C, H', W', k, k)
    return sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d(x: np.ndarray, kernel: np.ndarray, padding: int = 1) -> np.ndarray:
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise ShapeMismatchError(
            f"conv2d: вход {x.shape} не согласован с ядром {kernel.shape}"
        )
    k = kernel.shape[2]
    win = _windows(x, k, padding)
    return np.einsum("nihwab,oiab->nohw", win, kernel, optimize=True)


def conv2d_adjoint(g: np.ndarray, kernel: np.ndarray, padding: int = 1) -> np.ndarray:
    """Градиент по входу: Kᵀ g"""
    k = kernel.shape[2]
    flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return conv2d(g, flipped, padding=k - 1 - padding)


def conv2d_weight_grad(x: np.ndarray, g: np.ndarray, k: int, padding: int = 1) -> np.ndarray:
    """dL/dK по входу слоя x и градиенту по выходу g"""
    win = _windows(x, k, padding)
    return np.einsum("nohw,nihwab->oiab", g, win, optimize=True)


# ────────────────────────────────────────────────
# Max-pool (окно = шаг = size)
# ────────────────────────────────────────────────

def maxpool2d(x: np.ndarray, size: int) -> tuple[np.ndarray, np.ndarray | None]:
    """
    Возвращает (выход, индексы максимумов внутри окна).
    При равенстве выбирается первый максимум (np.argmax) — градиент идёт только в него.
    """
    if size == 1:
        return x, None
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeMismatchError(f"maxpool2d: {h}x{w} не делится на окно {size}")
    blocks = x.reshape(n, c, h // size, size, w // size, size)
    blocks = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // size, w // size, size * size)
    idx = np.argmax(blocks, axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2d_backward(g: np.ndarray, idx: np.ndarray | None, size: int,
                       in_shape: tuple) -> np.ndarray:
    if size == 1:
        return g
    n, c, h, w = in_shape
    blocks = np.zeros((n, c, h // size, w // size, size * size), dtype=np.float64)
    np.put_along_axis(blocks, idx[..., None], g[..., None], axis=-1)
    blocks = blocks.reshape(n, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
    return blocks.reshape(n, c, h, w)


# ────────────────────────────────────────────────
# Свёрточный слой как неявный линейный оператор
# ────────────────────────────────────────────────

class ConvOperator(NamedTuple):
    apply: Callable[[np.ndarray], np.ndarray]
    apply_adjoint: Callable[[np.ndarray], np.ndarray]
    in_shape: tuple
    out_shape: tuple


def conv_operator(kernel: np.ndarray, spatial: int | tuple[int, int], padding: int = 1) -> ConvOperator:
    """Свёртка одного изображения (C_in, H, W) → (C_out, H', W') для степенного метода"""
    h, w = (spatial, spatial) if isinstance(spatial, int) else spatial
    c_out, c_in, k, _ = kernel.shape
    in_shape = (c_in, h, w)
    out_shape = (c_out, h + 2 * padding - k + 1, w + 2 * padding - k + 1)

    def apply(v: np.ndarray) -> np.ndarray:
        return conv2d(v.reshape(1, *in_shape), kernel, padding)[0]

    def apply_adjoint(u: np.ndarray) -> np.ndarray:
        return conv2d_adjoint(u.reshape(1, *out_shape), kernel, padding)[0]

    return ConvOperator(apply, apply_adjoint, in_shape, out_shape)
