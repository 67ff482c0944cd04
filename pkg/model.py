"""
model.py — сети без bias: полносвязная ReLU (FF) и 5-слойная CNN.

ReLU стоит после КАЖДОГО линейного/свёрточного слоя, включая последний,
поэтому f(0) = 0 и все выходы ≥ 0.
θ (ParamVector) — конкатенация развёрнутых весов в порядке слоёв.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from app_logger import log_debug, log_soft
from core_math import (
    Matrix,
    PowerIterSettings,
    Vector,
    derive_seed,
    make_rng,
    spectral_norm_exact,
    spectral_norm_operator,
)
from errors import ArchitectureError, CheckpointError, ShapeMismatchError
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
from losses import LossKind, loss_and_output_grad

ParamVector = Vector

CHECKPOINT_FORMAT = "lipdd-checkpoint"
CHECKPOINT_VERSION = 1
JACOBIAN_CHUNK = 256


# ────────────────────────────────────────────────
# Описания архитектур
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class FFArch:
    """widths=() — один линейный слой input_dim → output_dim"""
    widths: tuple[int, ...]
    input_dim: int = 40
    output_dim: int = 10

    kind = "ff"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w < 1 for w in self.widths) or self.input_dim < 1 or self.output_dim < 1:
            raise ArchitectureError(f"FF: нулевые размеры недопустимы: {self}")

    @property
    def depth(self) -> int:
        return len(self.widths)

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        dims = [self.input_dim, *self.widths, self.output_dim]
        return [(dims[i + 1], dims[i]) for i in range(len(dims) - 1)]

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "widths": list(self.widths),
                "input_dim": self.input_dim, "output_dim": self.output_dim}


@dataclass(frozen=True)
class CnnArch:
    """4 блока Conv(3×3, pad 1)-ReLU-MaxPool с каналами [w, 2w, 4w, 8w] и линейный слой"""
    width: int
    in_channels: int = 3
    image_size: int = 32
    output_dim: int = 10
    pools: tuple[int, ...] = (1, 2, 2, 8)
    kernel_size: int = 3

    kind = "cnn"

    def __post_init__(self):
        object.__setattr__(self, "pools", tuple(int(p) for p in self.pools))
        if self.width < 1 or self.in_channels < 1 or self.output_dim < 1:
            raise ArchitectureError(f"CNN: нулевые размеры недопустимы: {self}")
        size = self.image_size
        for pool in self.pools:
            if pool < 1 or size % pool:
                raise ArchitectureError(f"CNN: размер {size} не делится на pool {pool}")
            size //= pool

    @property
    def channels(self) -> list[int]:
        return [self.width * (2 ** i) for i in range(len(self.pools))]

    @property
    def conv_input_sizes(self) -> list[int]:
        """Пространственный размер входа каждой свёртки: [32, 32, 16, 8] по умолчанию"""
        sizes, size = [], self.image_size
        for pool in self.pools:
            sizes.append(size)
            size //= pool
        return sizes

    @property
    def final_size(self) -> int:
        size = self.image_size
        for pool in self.pools:
            size //= pool
        return size

    @property
    def input_dim(self) -> int:
        return self.in_channels * self.image_size * self.image_size

    @property
    def input_shape(self) -> tuple[int, int, int]:
        return (self.in_channels, self.image_size, self.image_size)

    @property
    def layer_shapes(self) -> list[tuple[int, ...]]:
        k = self.kernel_size
        prev = self.in_channels
        shapes: list[tuple[int, ...]] = []
        for c in self.channels:
            shapes.append((c, prev, k, k))
            prev = c
        shapes.append((self.output_dim, prev * self.final_size ** 2))
        return shapes

    @property
    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.layer_shapes)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "width": self.width, "in_channels": self.in_channels,
                "image_size": self.image_size, "output_dim": self.output_dim,
                "pools": list(self.pools), "kernel_size": self.kernel_size}


Arch = FFArch | CnnArch


def arch_from_dict(d: dict) -> Arch:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "ff":
        return FFArch(widths=tuple(d["widths"]), input_dim=d["input_dim"], output_dim=d["output_dim"])
    if kind == "cnn":
        d["pools"] = tuple(d.get("pools", (1, 2, 2, 8)))
        return CnnArch(**d)
    raise ArchitectureError(f"неизвестный вид архитектуры: {kind!r}")


# ────────────────────────────────────────────────
# Сети
# ────────────────────────────────────────────────

@dataclass
class Network:
    arch: Arch
    weights: list[np.ndarray]
    seed: int = 0

    @property
    def param_count(self) -> int:
        return sum(w.size for w in self.weights)

    @property
    def output_dim(self) -> int:
        return self.arch.output_dim

    @property
    def input_dim(self) -> int:
        return self.arch.input_dim

    def forward(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        out, _ = self.forward_cache(self.prepare(x))
        return out[0] if single else out

    def prepare(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def forward_cache(self, x: np.ndarray) -> tuple[np.ndarray, object]:
        raise NotImplementedError

    def backward(self, cache, g_out: np.ndarray, need_weights: bool = True,
                 need_input: bool = False) -> tuple[list[np.ndarray] | None, np.ndarray | None]:
        raise NotImplementedError

    def jacobians(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class FFReluNet(Network):
    def prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.arch.input_dim:
            raise ShapeMismatchError(
                f"FF: ожидался вход размерности {self.arch.input_dim}, получено {x.shape}"
            )
        return x

    def forward_cache(self, x):
        acts, pres = [x], []
        h = x
        for w in self.weights:
            z = h @ w.T
            pres.append(z)
            h = relu(z)
            acts.append(h)
        return h, (acts, pres)

    def backward(self, cache, g_out, need_weights=True, need_input=False):
        acts, pres = cache
        n_layers = len(self.weights)
        grads: list[np.ndarray] | None = [None] * n_layers if need_weights else None
        dx = None
        g = g_out * relu_mask(pres[-1])
        for i in range(n_layers - 1, -1, -1):
            if need_weights:
                grads[i] = g.T @ acts[i]
            if i > 0:
                g = (g @ self.weights[i]) * relu_mask(pres[i - 1])
            elif need_input:
                dx = g @ self.weights[0]
        return grads, dx

    def jacobians(self, x):
        # обратный режим: K < d, поэтому идём от выхода ко входу
        _, (_, pres) = self.forward_cache(x)
        g = relu_mask(pres[-1])[:, :, None] * self.weights[-1][None, :, :]
        for i in range(len(self.weights) - 2, -1, -1):
            g = (g * relu_mask(pres[i])[:, None, :]) @ self.weights[i]
        return g


class CnnNet(Network):
    def prepare(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        shape = self.arch.input_shape
        if x.ndim == 1 or x.ndim == 3:
            x = x[None, ...]
        if x.ndim == 2 and x.shape[1] == self.arch.input_dim:
            x = x.reshape(x.shape[0], *shape)
        if x.ndim != 4 or x.shape[1:] != shape:
            raise ShapeMismatchError(f"CNN: ожидался вход {shape} (или {self.arch.input_dim}), получено {x.shape}")
        return x

    def forward_cache(self, x):
        blocks = []
        h = x
        for kernel, pool in zip(self.weights[:-1], self.arch.pools):
            z = conv2d(h, kernel, padding=1)
            r = relu(z)
            pooled, idx = maxpool2d(r, pool)
            blocks.append((h, z, idx, r.shape))
            h = pooled
        flat = h.reshape(h.shape[0], -1)
        z_lin = flat @ self.weights[-1].T
        return relu(z_lin), (blocks, flat, z_lin, h.shape)

    def backward(self, cache, g_out, need_weights=True, need_input=False):
        blocks, flat, z_lin, pooled_shape = cache
        grads: list[np.ndarray] | None = [None] * len(self.weights) if need_weights else None
        g = g_out * relu_mask(z_lin)
        if need_weights:
            grads[-1] = g.T @ flat
        g = (g @ self.weights[-1]).reshape(pooled_shape)
        k = self.arch.kernel_size
        for b in range(len(blocks) - 1, -1, -1):
            x_in, z, idx, r_shape = blocks[b]
            g = maxpool2d_backward(g, idx, self.arch.pools[b], r_shape) * relu_mask(z)
            if need_weights:
                grads[b] = conv2d_weight_grad(x_in, g, k, padding=1)
            if b > 0 or need_input:
                g = conv2d_adjoint(g, self.weights[b], padding=1)
        dx = g.reshape(g.shape[0], -1) if need_input else None
        return grads, dx

    def jacobians(self, x):
        out, cache = self.forward_cache(x)
        n, k_out = out.shape
        jac = np.empty((n, k_out, self.arch.input_dim), dtype=np.float64)
        for k in range(k_out):
            seed = np.zeros_like(out)
            seed[:, k] = 1.0
            _, dx = self.backward(cache, seed, need_weights=False, need_input=True)
            jac[:, k, :] = dx
        return jac


def _network_class(arch: Arch) -> type[Network]:
    return FFReluNet if isinstance(arch, FFArch) else CnnNet


# ────────────────────────────────────────────────
# Операции
# ────────────────────────────────────────────────

def init(arch: Arch, seed: int) -> Network:
    """
    Равномерная инициализация U(−b, b), b = √(2/fan_in)·√3 (ReLU-gain, fan-in).
    Слои заполняются по порядку из одного потока Philox.
    """
    rng = make_rng(derive_seed(seed, "init"))
    weights = []
    for shape in arch.layer_shapes:
        fan_in = int(np.prod(shape[1:]))
        bound = np.sqrt(2.0 / fan_in) * np.sqrt(3.0)
        weights.append(rng.uniform(-bound, bound, size=shape))
    net = _network_class(arch)(arch=arch, weights=weights, seed=int(seed))
    log_debug(f"[MODEL] init {arch.kind} seed={seed}: p={net.param_count}")
    return net


def from_weights(arch: Arch, weights, seed: int = 0) -> Network:
    """Сеть из готовых весов (проверка форм по архитектуре)"""
    weights = [np.array(w, dtype=np.float64) for w in weights]
    expected = arch.layer_shapes
    if len(weights) != len(expected) or any(w.shape != tuple(s) for w, s in zip(weights, expected)):
        raise ShapeMismatchError(
            f"веса {[w.shape for w in weights]} не соответствуют архитектуре {expected}"
        )
    return _network_class(arch)(arch=arch, weights=weights, seed=int(seed))


def forward(net: Network, x) -> np.ndarray:
    return net.forward(x)


def loss_and_grads(net: Network, x, labels, kind: LossKind | str,
                   reduction: str = "mean") -> tuple[float, list[np.ndarray]]:
    """Средний loss по батчу и градиенты по весам каждого слоя"""
    x = net.prepare(x)
    labels = np.asarray(labels)
    if x.shape[0] == 0:
        raise ShapeMismatchError("пустой батч")
    out, cache = net.forward_cache(x)
    loss, g_out = loss_and_output_grad(out, labels, kind, reduction)
    grads, _ = net.backward(cache, g_out)
    return loss, grads


def flatten(arrays: list[np.ndarray]) -> ParamVector:
    return np.concatenate([a.ravel() for a in arrays])


def param_grad(net: Network, x, labels, kind: LossKind | str, reduction: str = "mean") -> ParamVector:
    return flatten(loss_and_grads(net, x, labels, kind, reduction)[1])


def iter_input_jacobians(net: Network, x, chunk: int = JACOBIAN_CHUNK) -> Iterator[tuple[int, np.ndarray]]:
    """Якобианы по кускам: (начальный индекс, N_chunk × K × d)"""
    x = net.prepare(x)
    for start in range(0, x.shape[0], chunk):
        yield start, net.jacobians(x[start:start + chunk])


def input_jacobians(net: Network, x, chunk: int = JACOBIAN_CHUNK) -> np.ndarray:
    parts = [j for _, j in iter_input_jacobians(net, x, chunk)]
    if not parts:
        return np.zeros((0, net.output_dim, net.input_dim))
    return np.concatenate(parts, axis=0)


def input_jacobian(net: Network, x) -> Matrix:
    """∇_x f(x): K × d. Для FF это D_L W_L ⋯ D_1 W_1 с масками активности в точке x"""
    return input_jacobians(net, np.asarray(x, dtype=np.float64).reshape(1, -1))[0]


def conv_operator_norm(kernel: np.ndarray, spatial: int, s: PowerIterSettings | None = None,
                       padding: int = 1) -> float:
    op = conv_operator(kernel, spatial, padding)
    return spectral_norm_operator(op.apply, op.apply_adjoint, op.in_shape, op.out_shape, s, upper=True)


def layer_spectral_norms(net: Network, s: PowerIterSettings | None = None) -> list[float]:
    """
    ||W_i||₂ по слоям; ReLU и max-pool 1-липшицевы и в список не входят.
    Плотные слои считаются точно (Грам + eigvalsh), свёртки оцениваются сверху по невязке.
    """
    s = s or PowerIterSettings()
    if isinstance(net.arch, FFArch):
        return [spectral_norm_exact(w) for w in net.weights]
    norms = [conv_operator_norm(kernel, size, s)
             for kernel, size in zip(net.weights[:-1], net.arch.conv_input_sizes)]
    norms.append(spectral_norm_exact(net.weights[-1]))
    return norms


def params_of(net: Network) -> ParamVector:
    return flatten(net.weights)


def with_params(net: Network, theta) -> Network:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size != net.param_count:
        raise ShapeMismatchError(f"длина θ {theta.size} ≠ числу параметров {net.param_count}")
    weights, offset = [], 0
    for w in net.weights:
        weights.append(theta[offset:offset + w.size].reshape(w.shape).copy())
        offset += w.size
    return _network_class(net.arch)(arch=net.arch, weights=weights, seed=net.seed)


def copy_net(net: Network) -> Network:
    return _network_class(net.arch)(arch=net.arch, weights=[w.copy() for w in net.weights], seed=net.seed)


def param_distance(net: Network, reference: ParamVector) -> float:
    """||θ_t − θ_0||₂"""
    theta = params_of(net)
    reference = np.asarray(reference, dtype=np.float64)
    if reference.shape != theta.shape:
        raise ShapeMismatchError(f"длины θ не совпадают: {theta.size} и {reference.size}")
    return float(np.linalg.norm(theta - reference))


# ────────────────────────────────────────────────
# Чекпоинты
# ────────────────────────────────────────────────

@dataclass
class Checkpoint:
    net: Network
    seed: int
    epoch: int
    meta: dict = field(default_factory=dict)


def save_checkpoint(net: Network, path: Path, epoch: int, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": net.arch.to_dict(),
        "seed": int(net.seed),
        "epoch": int(epoch),
        "dtype": "<f8",
        "meta": meta or {},
        "weights": [
            {"shape": list(w.shape),
             "data": base64.b64encode(np.ascontiguousarray(w, dtype="<f8").tobytes()).decode("ascii")}
            for w in net.weights
        ],
    }
    path.write_text(json.dumps(payload), encoding="utf-8")
    log_soft(f"[MODEL] чекпоинт сохранён: {path} (epoch={epoch})")
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as e:
        raise CheckpointError(f"{path}: не удалось прочитать чекпоинт: {e}") from e

    if payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: неизвестный формат {payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: неподдерживаемая версия {payload.get('version')!r}")

    arch = arch_from_dict(payload["arch"])
    weights = []
    for i, entry in enumerate(payload["weights"]):
        raw = base64.b64decode(entry["data"])
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        if arr.size != int(np.prod(entry["shape"])):
            raise CheckpointError(f"{path}: слой {i}: размер данных не совпадает с формой {entry['shape']}")
        weights.append(arr.reshape(entry["shape"]))
    net = from_weights(arch, weights, seed=payload.get("seed", 0))
    return Checkpoint(net=net, seed=int(payload.get("seed", 0)), epoch=int(payload.get("epoch", 0)),
                      meta=payload.get("meta", {}))
