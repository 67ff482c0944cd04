"""
data.py — загрузка датасетов, порча меток, подвыборка и синтетическая замена MNIST1D.

Форматы:
    MNIST1D — CSV с заголовком `label,x0..x39` (или `split,label,x0..x39` в одном файле);
              либо папка с train.csv / test.csv. Значения не нормализуются.
    CIFAR-10 — бинарные батчи: записи по 3073 байта (1 байт метки + 3072 байта
              пикселей, плоскости R, G, B). Пиксели масштабируются в [0, 1].

Каждая мутация пишется в журнал provenance; replay() воспроизводит датасет
из нетронутого источника бит-в-бит.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, Field

from app_logger import log_main, log_soft
from core_math import derive_seed, make_rng
from errors import ConfigError, DatasetFormatError

MNIST1D_DIM = 40
MNIST1D_COUNTS = (4000, 1000)
CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_COUNTS = (50_000, 10_000)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"
NUM_CLASSES = 10


class Mutation(BaseModel):
    op: Literal["shuffle_labels", "subsample"]
    seed: int
    alpha: float | None = None
    n: int | None = None


class Provenance(BaseModel):
    source: Literal["mnist1d", "cifar10", "synthetic"]
    path: str | None = None
    normalization: str = "none"
    params: dict = Field(default_factory=dict)
    mutations: list[Mutation] = Field(default_factory=list)

    def with_mutation(self, m: Mutation) -> "Provenance":
        return self.model_copy(update={"mutations": [*self.mutations, m]})


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: Literal["train", "test"]
    provenance: Provenance
    image_shape: tuple[int, ...] | None = None

    def __post_init__(self):
        inputs = np.array(self.inputs, dtype=np.float64)
        labels = np.array(self.labels, dtype=np.int64)
        if inputs.ndim != 2 or labels.shape != (inputs.shape[0],):
            raise DatasetFormatError(self.provenance.path, None,
                                     f"несогласованные формы: inputs {inputs.shape}, labels {labels.shape}")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetFormatError(self.provenance.path, None, f"метки вне [0, {self.num_classes})")
        inputs.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def describe(self) -> str:
        muts = ", ".join(f"{m.op}(α={m.alpha}, n={m.n}, seed={m.seed})" for m in self.provenance.mutations)
        return f"{self.provenance.source}/{self.split}: N={self.n}, d={self.input_dim}, K={self.num_classes}" + \
            (f" [{muts}]" if muts else "")


# ────────────────────────────────────────────────
# MNIST1D (CSV)
# ────────────────────────────────────────────────

def _read_mnist1d_csv(path: Path, input_dim: int, num_classes: int) -> dict[str, tuple[list, list]]:
    feature_cols = [f"x{i}" for i in range(input_dim)]
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None:
            raise DatasetFormatError(path, None, "пустой файл")
        header = [h.strip() for h in header]
        has_split = header[:1] == ["split"]
        expected = (["split"] if has_split else []) + ["label"] + feature_cols
        if header != expected:
            raise DatasetFormatError(path, 1, f"неверный заголовок: ожидалось {','.join(expected[:3])}…x{input_dim - 1}")

        parts: dict[str, tuple[list, list]] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DatasetFormatError(path, row_no, f"ожидалось {len(expected)} столбцов, получено {len(row)}")
            split = row[0].strip() if has_split else ""
            if has_split and split not in ("train", "test"):
                raise DatasetFormatError(path, row_no, f"split должен быть train | test, получено {split!r}")
            off = 1 if has_split else 0
            try:
                label = int(row[off])
                values = [float(v) for v in row[off + 1:]]
            except ValueError as e:
                raise DatasetFormatError(path, row_no, f"не число: {e}") from None
            if not 0 <= label < num_classes:
                raise DatasetFormatError(path, row_no, f"метка {label} вне [0, {num_classes})")
            if not all(math.isfinite(v) for v in values):
                raise DatasetFormatError(path, row_no, "нечисловое значение признака")
            xs, ys = parts.setdefault(split, ([], []))
            xs.append(values)
            ys.append(label)
    if not parts:
        raise DatasetFormatError(path, None, "нет ни одной строки данных")
    return parts


def _mnist1d_split(path: Path, rows: tuple[list, list], split: str, expected: int | None,
                   input_dim: int, num_classes: int) -> Dataset:
    xs, ys = rows
    if expected is not None and len(ys) != expected:
        raise DatasetFormatError(path, None, f"{split}: ожидалось {expected} объектов, получено {len(ys)}")
    prov = Provenance(source="mnist1d", path=str(path))
    return Dataset(np.array(xs, dtype=np.float64).reshape(len(ys), input_dim), np.array(ys), num_classes, split, prov)


def load_mnist1d(path: Path, expected_counts: tuple[int, int] | None = MNIST1D_COUNTS,
                 input_dim: int = MNIST1D_DIM, num_classes: int = NUM_CLASSES) -> tuple[Dataset, Dataset]:
    path = Path(path)
    exp_train, exp_test = expected_counts or (None, None)
    if path.is_dir():
        train_rows = _read_mnist1d_csv(path / "train.csv", input_dim, num_classes)
        test_rows = _read_mnist1d_csv(path / "test.csv", input_dim, num_classes)
        train_part, test_part = train_rows.get(""), test_rows.get("")
        if train_part is None or test_part is None:
            raise DatasetFormatError(path, None, "в папке ожидаются train.csv и test.csv без столбца split")
        train = _mnist1d_split(path / "train.csv", train_part, "train", exp_train, input_dim, num_classes)
        test = _mnist1d_split(path / "test.csv", test_part, "test", exp_test, input_dim, num_classes)
    else:
        parts = _read_mnist1d_csv(path, input_dim, num_classes)
        if "train" not in parts or "test" not in parts:
            raise DatasetFormatError(path, None, "один файл должен содержать столбец split со значениями train и test")
        train = _mnist1d_split(path, parts["train"], "train", exp_train, input_dim, num_classes)
        test = _mnist1d_split(path, parts["test"], "test", exp_test, input_dim, num_classes)
    log_soft(f"[DATA] MNIST1D загружен: {train.describe()}; {test.describe()}")
    return train, test


# ────────────────────────────────────────────────
# CIFAR-10 (бинарные батчи)
# ────────────────────────────────────────────────

def read_cifar_batch(path: Path) -> tuple[np.ndarray, np.ndarray]:
    """(N × 3072 в [0, 1], N меток); запись = 1 байт метки + 3072 байта пикселей"""
    path = Path(path)
    raw = path.read_bytes()
    if not raw:
        raise DatasetFormatError(path, None, "пустой файл")
    if len(raw) % CIFAR_RECORD:
        full = len(raw) // CIFAR_RECORD
        raise DatasetFormatError(path, full + 1,
                                 f"обрезанная запись: длина {len(raw)} не кратна {CIFAR_RECORD}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DatasetFormatError(path, int(bad[0]) + 1, f"метка {int(labels[bad[0]])} вне [0, {NUM_CLASSES})")
    return records[:, 1:].astype(np.float64) / 255.0, labels


def load_cifar10(directory: Path, expected_counts: tuple[int, int] | None = CIFAR_COUNTS) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    exp_train, exp_test = expected_counts or (None, None)
    xs, ys = zip(*(read_cifar_batch(directory / name) for name in CIFAR_TRAIN_FILES))
    train_x, train_y = np.concatenate(xs), np.concatenate(ys)
    test_x, test_y = read_cifar_batch(directory / CIFAR_TEST_FILE)
    for split, n, exp in (("train", train_y.size, exp_train), ("test", test_y.size, exp_test)):
        if exp is not None and n != exp:
            raise DatasetFormatError(directory, None, f"{split}: ожидалось {exp} объектов, получено {n}")
    prov = Provenance(source="cifar10", path=str(directory), normalization="scale-255")
    train = Dataset(train_x, train_y, NUM_CLASSES, "train", prov, CIFAR_SHAPE)
    test = Dataset(test_x, test_y, NUM_CLASSES, "test", prov, CIFAR_SHAPE)
    log_soft(f"[DATA] CIFAR-10 загружен: {train.describe()}; {test.describe()}")
    return train, test


# ────────────────────────────────────────────────
# Мутации
# ────────────────────────────────────────────────

def shuffle_labels(d: Dataset, alpha: float, seed: int) -> Dataset:
    """
    Выбирает ⌊αN⌋ позиций без возвращения и переставляет метки НА этих позициях
    (без принудительной derangement). Входы не меняются.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha должен быть в [0, 1], получено {alpha}")
    n = d.n
    k = min(n, int(math.floor(alpha * n + 1e-9)))
    rng = make_rng(derive_seed(seed, "shuffle-labels"))
    idx = np.sort(rng.choice(n, size=k, replace=False))
    perm = rng.permutation(k)
    labels = d.labels.copy()
    labels[idx] = d.labels[idx][perm]
    prov = d.provenance.with_mutation(Mutation(op="shuffle_labels", alpha=alpha, seed=seed))
    return replace(d, labels=labels, provenance=prov)


def subsample(d: Dataset, n: int, seed: int) -> Dataset:
    """n объектов без возвращения; порядок — по исходному индексу"""
    if not 1 <= n <= d.n:
        raise ValueError(f"размер подвыборки {n} вне [1, {d.n}]")
    rng = make_rng(derive_seed(seed, "subsample"))
    idx = np.sort(rng.choice(d.n, size=n, replace=False))
    prov = d.provenance.with_mutation(Mutation(op="subsample", n=n, seed=seed))
    return replace(d, inputs=d.inputs[idx], labels=d.labels[idx], provenance=prov)


def replay(pristine: Dataset, provenance: Provenance) -> Dataset:
    """Применяет журнал мутаций к нетронутому датасету"""
    d = pristine
    for m in provenance.mutations:
        if m.op == "subsample":
            d = subsample(d, m.n, m.seed)
        else:
            d = shuffle_labels(d, m.alpha, m.seed)
    return d


# ────────────────────────────────────────────────
# Синтетическая замена
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class LabelNet:
    w1: np.ndarray
    w2: np.ndarray

    def labels(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(np.maximum(x @ self.w1.T, 0.0) @ self.w2.T, axis=1)


def synthetic_label_net(d: int, num_classes: int, seed: int, hidden: int = 32) -> LabelNet:
    """Случайная разметочная сеть: скрытый слой ширины hidden с ReLU, линейный выход, argmax"""
    rng = make_rng(derive_seed(seed, "label-net"))
    w1 = rng.standard_normal((hidden, d)) / np.sqrt(d)
    w2 = rng.standard_normal((num_classes, hidden)) / np.sqrt(hidden)
    return LabelNet(w1, w2)


def synthetic_fallback(n_train: int, n_test: int, d: int = MNIST1D_DIM, num_classes: int = NUM_CLASSES,
                       seed: int = 0, hidden: int = 32) -> tuple[Dataset, Dataset]:
    if num_classes < 2:
        raise ValueError(f"нужно K ≥ 2, получено {num_classes}")
    label_net = synthetic_label_net(d, num_classes, seed, hidden)
    rng = make_rng(derive_seed(seed, "synthetic-inputs"))
    train_x = rng.standard_normal((n_train, d))
    test_x = rng.standard_normal((n_test, d))
    prov = Provenance(source="synthetic", params={"n_train": n_train, "n_test": n_test, "d": d,
                                                 "num_classes": num_classes, "seed": seed, "hidden": hidden})
    train = Dataset(train_x, label_net.labels(train_x), num_classes, "train", prov)
    test = Dataset(test_x, label_net.labels(test_x), num_classes, "test", prov)
    log_soft(f"[DATA] синтетический набор: {train.describe()}; {test.describe()}")
    return train, test


# ────────────────────────────────────────────────
# Разбор ссылки на данные из конфигурации
# ────────────────────────────────────────────────

def load_pristine(cfg) -> tuple[Dataset, Dataset]:
    """Источник без мутаций по секции [data]"""
    if cfg.source == "synthetic":
        return synthetic_fallback(cfg.n_train, cfg.n_test, cfg.input_dim, cfg.num_classes, cfg.seed)
    if cfg.path is None:
        raise DatasetFormatError(None, None, f"для источника {cfg.source} нужен data.path")
    path = Path(cfg.path)
    if cfg.source == "mnist1d":
        counts = MNIST1D_COUNTS if cfg.strict_counts else None
        return load_mnist1d(path, counts, cfg.input_dim, cfg.num_classes)
    counts = CIFAR_COUNTS if cfg.strict_counts else None
    return load_cifar10(path, counts)


def load_dataset(cfg) -> tuple[Dataset, Dataset]:
    """(train, test) с мутациями из конфигурации: сначала подвыборка, затем порча меток"""
    train, test = load_pristine(cfg)
    if cfg.subsample is not None:
        if not 1 <= cfg.subsample <= train.n:
            raise ConfigError("data.subsample", f"размер подвыборки {cfg.subsample} вне [1, {train.n}]")
        train = subsample(train, cfg.subsample, cfg.subsample_seed)
    if cfg.shuffle_fraction > 0:
        train = shuffle_labels(train, cfg.shuffle_fraction, cfg.shuffle_seed)
        if cfg.corrupt_test:
            test = shuffle_labels(test, cfg.shuffle_fraction, cfg.shuffle_seed)
    if train.provenance.mutations:
        log_main(f"[DATA] {train.describe()}")
    return train, test
