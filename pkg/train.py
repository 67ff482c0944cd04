"""
train.py — оптимизаторы (SGD / Adam), LR-расписания и цикл обучения
с ранней остановкой по норме полного градиента.

Эпоха 0 — состояние при инициализации; обучающие эпохи нумеруются с 1.
Шаг расписания делается на каждом обновлении, расписание знает длину эпохи в обновлениях.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, ClassVar, Iterator

import numpy as np
from pydantic import BaseModel

from app_logger import log_debug, log_soft
from core_math import derive_seed, make_rng
from errors import ShapeMismatchError, TrainingDivergedError
from losses import LossKind, loss_and_output_grad, parse_loss_kind, predictions
from metrics_log import MetricsLog
from model import Network, ParamVector, flatten, loss_and_grads, param_distance, params_of

EVAL_CHUNK = 1024
DEFAULT_THRESHOLDS = {LossKind.CE: 0.01, LossKind.MSE: 0.001}


# ────────────────────────────────────────────────
# Loss на батче
# ────────────────────────────────────────────────

def loss_and_grad(net: Network, batch: tuple[np.ndarray, np.ndarray], kind: LossKind | str,
                  reduction: str = "mean") -> tuple[float, ParamVector]:
    x, labels = batch
    loss, grads = loss_and_grads(net, x, labels, kind, reduction)
    return loss, flatten(grads)


@dataclass(frozen=True)
class Evaluation:
    loss: float
    grad_norm: float
    accuracy: float


def evaluate(net: Network, x, labels, kind: LossKind | str, reduction: str = "mean",
             with_grad: bool = True, chunk: int = EVAL_CHUNK) -> Evaluation:
    """Loss, 2-норма градиента и точность на ВСЁМ наборе (кусками, с весами n_chunk / N)"""
    x = net.prepare(x)
    labels = np.asarray(labels)
    n = x.shape[0]
    if n == 0:
        raise ShapeMismatchError("evaluate: пустой набор")
    total_loss = 0.0
    correct = 0
    grad_sum = [np.zeros_like(w) for w in net.weights] if with_grad else None
    for start in range(0, n, chunk):
        xs, ys = x[start:start + chunk], labels[start:start + chunk]
        weight = xs.shape[0] / n
        out, cache = net.forward_cache(xs)
        loss, g_out = loss_and_output_grad(out, ys, kind, reduction)
        total_loss += weight * loss
        correct += int(np.sum(predictions(out) == ys))
        if with_grad:
            grads, _ = net.backward(cache, g_out)
            for acc, g in zip(grad_sum, grads):
                acc += weight * g
    grad_norm = float(np.linalg.norm(flatten(grad_sum))) if with_grad else float("nan")
    return Evaluation(loss=float(total_loss), grad_norm=grad_norm, accuracy=correct / n)


# ────────────────────────────────────────────────
# Оптимизаторы
# ────────────────────────────────────────────────

class Optimizer:
    name = "base"

    def __init__(self, base_lr: float):
        if base_lr < 0:
            raise ValueError(f"base_lr должен быть ≥ 0, получено {base_lr}")
        self.base_lr = float(base_lr)

    def step(self, weights: list[np.ndarray], grads: list[np.ndarray], eta: float):
        raise NotImplementedError


class Sgd(Optimizer):
    """SGD без momentum: θ ← θ − (η·λ)·g"""
    name = "sgd"

    def step(self, weights, grads, eta):
        lr = eta * self.base_lr
        for w, g in zip(weights, grads):
            w -= lr * g


class Adam(Optimizer):
    name = "adam"

    def __init__(self, base_lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(base_lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m: list[np.ndarray] | None = None
        self.v: list[np.ndarray] | None = None

    def step(self, weights, grads, eta):
        if self.m is None:
            self.m = [np.zeros_like(w) for w in weights]
            self.v = [np.zeros_like(w) for w in weights]
        self.t += 1
        lr = eta * self.base_lr
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for w, g, m, v in zip(weights, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            w -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, base_lr: float) -> Optimizer:
    name = str(name).strip().lower()
    if name == "sgd":
        return Sgd(base_lr)
    if name == "adam":
        return Adam(base_lr)
    raise ValueError(f"неизвестный оптимизатор: {name!r} (ожидалось sgd | adam)")


# ────────────────────────────────────────────────
# LR-расписания
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class LrSchedule:
    """
    warmup   — линейный разгон max(1, u)/warmup_updates до 1, затем step_factor
               каждые step_epochs эпох, не более max_steps раз (потом плато)
    cont     — cont_factor каждые cont_epochs эпох
    constant — всегда 1
    """
    kind: str
    updates_per_epoch: int = 1
    warmup_updates: int = 20_000
    step_factor: float = 0.75
    step_epochs: int = 2_500
    max_steps: int = 3
    cont_factor: float = 0.95
    cont_epochs: int = 100

    def __post_init__(self):
        if self.kind not in ("warmup", "cont", "constant"):
            raise ValueError(f"неизвестное расписание: {self.kind!r}")
        if self.updates_per_epoch < 1:
            raise ValueError("updates_per_epoch должен быть ≥ 1")

    @classmethod
    def warmup20000_step25(cls, updates_per_epoch: int) -> "LrSchedule":
        return cls("warmup", updates_per_epoch)

    @classmethod
    def cont100(cls, updates_per_epoch: int) -> "LrSchedule":
        return cls("cont", updates_per_epoch)

    @classmethod
    def constant(cls, updates_per_epoch: int = 1) -> "LrSchedule":
        return cls("constant", updates_per_epoch)


SCHEDULE_NAMES = {
    "warmup20000step25": "warmup",
    "cont100": "cont",
    "constant": "constant",
}


def make_schedule(name: str, n_samples: int, batch_size: int, **overrides) -> LrSchedule:
    key = str(name).strip().lower().replace("_", "").replace("-", "")
    if key not in SCHEDULE_NAMES:
        raise ValueError(f"неизвестное расписание: {name!r} (ожидалось {', '.join(SCHEDULE_NAMES)})")
    return LrSchedule(SCHEDULE_NAMES[key], updates_per_epoch(n_samples, batch_size), **overrides)


def updates_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, math.ceil(n_samples / batch_size))


def schedule_coeff(s: LrSchedule, update_index: int) -> float:
    u = int(update_index)
    if u < 0:
        raise ValueError(f"update_index должен быть ≥ 0, получено {u}")
    if s.kind == "constant":
        return 1.0
    if s.kind == "cont":
        epoch = u // s.updates_per_epoch
        return s.cont_factor ** (epoch // s.cont_epochs)
    if u <= s.warmup_updates:
        return max(1, u) / s.warmup_updates
    steps = (u - s.warmup_updates) // (s.step_epochs * s.updates_per_epoch)
    return s.step_factor ** min(s.max_steps, steps)


# ────────────────────────────────────────────────
# Остановка и трасса
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class StopRule:
    grad_norm_threshold: float
    min_epochs: int = 0
    max_epochs: int = 100

    def __post_init__(self):
        if not self.grad_norm_threshold > 0:
            raise ValueError(f"порог нормы градиента должен быть > 0, получено {self.grad_norm_threshold}")
        if self.min_epochs < 0 or self.min_epochs > self.max_epochs:
            raise ValueError(f"нужно 0 ≤ min_epochs ≤ max_epochs, получено {self.min_epochs}, {self.max_epochs}")

    @classmethod
    def for_loss(cls, kind: LossKind | str, min_epochs: int = 0, max_epochs: int = 100) -> "StopRule":
        return cls(DEFAULT_THRESHOLDS[parse_loss_kind(kind)], min_epochs, max_epochs)

    def should_stop(self, epoch: int, grad_norm: float) -> bool:
        if epoch >= self.max_epochs:
            return True
        return epoch >= self.min_epochs and grad_norm <= self.grad_norm_threshold


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    test_loss: float | None = None
    grad_norm: float
    eta: float
    param_dist: float
    wall_ms: float
    train_acc: float

    TRACE_KEYS: ClassVar[tuple[str, ...]] = ("epoch", "train_loss", "test_loss", "grad_norm", "eta", "param_dist", "wall_ms")

    def trace_row(self) -> dict:
        return {k: getattr(self, k) for k in self.TRACE_KEYS}


@dataclass
class TrainTrace:
    initial: EpochRecord
    epochs: list[EpochRecord] = field(default_factory=list)
    stop_reason: str = "max_epochs"
    updates: int = 0

    @property
    def final(self) -> EpochRecord:
        return self.epochs[-1] if self.epochs else self.initial

    def write_jsonl(self, path: Path):
        log = MetricsLog(path)
        for rec in self.epochs:
            log.append_jsonl(rec.trace_row())


EpochCallback = Callable[[int, Network, EpochRecord], None]


def batch_indices(n: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Одна эпоха: перестановка индексов, нарезанная на батчи; последний неполный сохраняется"""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ────────────────────────────────────────────────
# Цикл обучения
# ────────────────────────────────────────────────

def train(net: Network, train_x, train_y, kind: LossKind | str, optimizer: Optimizer,
          schedule: LrSchedule, stop: StopRule, batch_size: int, seed: int,
          test_x=None, test_y=None, reduction: str = "mean",
          callback: EpochCallback | None = None, trace_path: Path | None = None,
          tag: str = "") -> TrainTrace:
    """
    Обучает net на месте. Порядок объектов перемешивается каждую эпоху генератором
    от seed; после эпохи считается полный градиент и проверяется StopRule.
    """
    kind = parse_loss_kind(kind)
    x = net.prepare(train_x)
    y = np.asarray(train_y)
    n = x.shape[0]
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size должен быть в [1, {n}], получено {batch_size}")
    has_test = test_x is not None and test_y is not None
    rng = make_rng(derive_seed(seed, "shuffle"))
    theta0 = params_of(net)

    def snapshot(epoch: int, eta: float, started: float) -> EpochRecord:
        ev = evaluate(net, x, y, kind, reduction)
        if not math.isfinite(ev.loss) or not math.isfinite(ev.grad_norm):
            raise TrainingDivergedError(epoch, ev.loss)
        test_loss = evaluate(net, test_x, test_y, kind, reduction, with_grad=False).loss if has_test else None
        return EpochRecord(
            epoch=epoch, train_loss=ev.loss, test_loss=test_loss, grad_norm=ev.grad_norm,
            eta=eta, param_dist=param_distance(net, theta0),
            wall_ms=(time.perf_counter() - started) * 1000.0, train_acc=ev.accuracy,
        )

    started = time.perf_counter()
    trace = TrainTrace(initial=snapshot(0, schedule_coeff(schedule, 0), started))
    if callback:
        callback(0, net, trace.initial)

    log_soft(f"[TRAIN] {tag} старт: n={n}, batch={batch_size}, {optimizer.name}, "
             f"lr={optimizer.base_lr}, loss={kind.value}, max_epochs={stop.max_epochs}")

    u = 0
    for epoch in range(1, stop.max_epochs + 1):
        started = time.perf_counter()
        eta = schedule_coeff(schedule, u)
        for idx in batch_indices(n, batch_size, rng):
            eta = schedule_coeff(schedule, u)
            loss, grads = loss_and_grads(net, x[idx], y[idx], kind, reduction)
            if not math.isfinite(loss):
                raise TrainingDivergedError(epoch, loss)
            optimizer.step(net.weights, grads, eta)
            u += 1

        rec = snapshot(epoch, eta, started)
        trace.epochs.append(rec)
        trace.updates = u
        log_debug(f"[TRAIN] {tag} epoch={epoch} loss={rec.train_loss:.6g} "
                  f"grad={rec.grad_norm:.3g} acc={rec.train_acc:.3f} eta={eta:.4g}")
        if callback:
            callback(epoch, net, rec)

        if stop.should_stop(epoch, rec.grad_norm):
            converged = epoch >= stop.min_epochs and rec.grad_norm <= stop.grad_norm_threshold
            trace.stop_reason = "converged" if converged else "max_epochs"
            break

    log_soft(f"[TRAIN] {tag} стоп на эпохе {trace.final.epoch} ({trace.stop_reason}): "
             f"train_loss={trace.final.train_loss:.6g}, grad={trace.final.grad_norm:.3g}")
    if trace_path is not None:
        trace.write_jsonl(trace_path)
    return trace


# ────────────────────────────────────────────────
# Сборка обучения из секции [train]
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class TrainSetup:
    kind: LossKind
    optimizer: str
    base_lr: float
    schedule: LrSchedule
    stop: StopRule
    batch_size: int
    reduction: str = "mean"

    def new_optimizer(self) -> Optimizer:
        """Свежий оптимизатор на каждый прогон (у Adam есть состояние)"""
        return make_optimizer(self.optimizer, self.base_lr)


def training_setup(cfg, family: str, n_train: int, loss: str | None = None,
                   optimizer: str | None = None) -> TrainSetup:
    """
    cfg — секция [train] (нужны атрибуты loss, optimizer, schedule, batch_size,
    min/max_epochs, grad_norm_threshold, mse_reduction, warmup_updates, step_epochs,
    cont_epochs, lr_for, batch_for). loss / optimizer переопределяют значения секции.
    """
    kind = parse_loss_kind(loss or cfg.loss)
    batch = min(cfg.batch_for(family), n_train)
    schedule = make_schedule(cfg.schedule, n_train, batch, warmup_updates=cfg.warmup_updates,
                             step_epochs=cfg.step_epochs, cont_epochs=cfg.cont_epochs)
    threshold = cfg.grad_norm_threshold or DEFAULT_THRESHOLDS[kind]
    return TrainSetup(
        kind=kind,
        optimizer=optimizer or cfg.optimizer,
        base_lr=cfg.lr_for(family, kind.value),
        schedule=schedule,
        stop=StopRule(threshold, min(cfg.min_epochs, cfg.max_epochs), cfg.max_epochs),
        batch_size=batch,
        reduction=cfg.mse_reduction,
    )


def fit(net: Network, train_set, setup: TrainSetup, seed: int, test_set=None,
        callback: EpochCallback | None = None, trace_path: Path | None = None, tag: str = "") -> TrainTrace:
    """train() над парой Dataset"""
    return train(
        net, train_set.inputs, train_set.labels, setup.kind, setup.new_optimizer(),
        setup.schedule, setup.stop, setup.batch_size, seed,
        test_x=test_set.inputs if test_set is not None else None,
        test_y=test_set.labels if test_set is not None else None,
        reduction=setup.reduction, callback=callback, trace_path=trace_path, tag=tag,
    )
