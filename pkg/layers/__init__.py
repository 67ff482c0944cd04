# layers/__init__.py
"""
Примитивы слоёв CNN: свёртка 3×3 (stride 1), её сопряжённый оператор,
градиент по ядру и max-pool с обратным проходом.
"""

from .conv import (
    conv2d,
    conv2d_adjoint,
    conv2d_weight_grad,
    conv_operator,
    maxpool2d,
    maxpool2d_backward,
    relu,
    relu_mask,
)

__all__ = [
    "conv2d",
    "conv2d_adjoint",
    "conv2d_weight_grad",
    "conv_operator",
    "maxpool2d",
    "maxpool2d_backward",
    "relu",
    "relu_mask",
]
