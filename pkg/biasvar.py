"""
biasvar.py — разложение ожидаемой тестовой ошибки ансамбля по сидам на bias² + variance
и две верхние оценки дисперсии через константы Липшица.

Ожидание по сиду заменяется эмпирическим средним по членам ансамбля, поэтому
перекрёстный член обнуляется алгебраически и тождество выполняется до округления.
Все величины — квадраты 2-норм по выходам (семантика MSE, one-hot цели).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel

from app_logger import log_both, log_main, log_soft
from core_math import derive_seed, make_rng
from errors import EnsembleError, LipddError, ShapeMismatchError
from lipschitz import BoundSettings, spectral_norms_of, SupAccumulator, lower_bound, upper_bound
from losses import check_labels, one_hot
from metrics_log import MetricsLog, write_csv
from model import FFArch, Network, init, iter_input_jacobians
from train import TrainSetup, fit

XPRIME_KINDS = ("zero", "test-point")

BIASVAR_COLUMNS = [
    "width", "bias_sq", "variance", "test_loss", "r_sq", "c_bar", "c_bar_zeta",
    "bound_v1_lower", "bound_v2_lower", "bound_v1_upper", "bound_v2_upper", "xprime_kind",
]


# ────────────────────────────────────────────────
# Ансамбль
# ────────────────────────────────────────────────

@dataclass
class SeedEnsemble:
    members: list[Network]

    def __post_init__(self):
        if len(self.members) < 2:
            raise EnsembleError(f"ансамблю нужно ≥ 2 сидов, получено {len(self.members)}")
        arch = self.members[0].arch
        for m in self.members[1:]:
            if m.arch != arch:
                raise EnsembleError(f"архитектуры членов ансамбля различаются: {arch} и {m.arch}")

    @property
    def seeds(self) -> list[int]:
        return [m.seed for m in self.members]

    @property
    def arch(self):
        return self.members[0].arch

    def outputs(self, x) -> np.ndarray:
        """S × N × K"""
        return np.stack([m.forward(x) for m in self.members])

    def mean_output(self, x) -> np.ndarray:
        return self.outputs(x).mean(axis=0)


# ────────────────────────────────────────────────
# Разложение
# ────────────────────────────────────────────────

def decompose_outputs(outputs: np.ndarray, targets: np.ndarray) -> tuple[float, float, float]:
    """outputs: S × N × K, targets: N × K → (bias_sq, variance, expected_test_loss)"""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.ndim != 3 or targets.shape != outputs.shape[1:]:
        raise ShapeMismatchError(f"outputs {outputs.shape} и targets {targets.shape} несовместимы")
    if outputs.shape[0] < 2:
        raise EnsembleError(f"разложению нужно ≥ 2 сидов, получено {outputs.shape[0]}")
    if outputs.shape[1] == 0:
        raise ShapeMismatchError("пустой тестовый набор")
    mean = outputs.mean(axis=0)
    bias_sq = float(np.mean(np.sum((targets - mean) ** 2, axis=-1)))
    variance = float(np.mean(np.sum((outputs - mean[None]) ** 2, axis=-1)))
    expected = float(np.mean(np.sum((targets[None] - outputs) ** 2, axis=-1)))
    return bias_sq, variance, expected


def targets_of(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    return one_hot(check_labels(labels, num_classes), num_classes)


def decompose(e: SeedEnsemble, test_x, test_y) -> tuple[float, float, float]:
    """test_y — метки (N) или уже готовые цели (N × K)"""
    return decompose_outputs(e.outputs(test_x), targets_of(test_y, e.arch.output_dim))


# ────────────────────────────────────────────────
# Константы ансамбля
# ────────────────────────────────────────────────

def ensemble_lipschitz_lower(e: SeedEnsemble, samples, bs: BoundSettings | None = None) -> tuple[float, float]:
    """
    (c_bar_hat, c_bar_zeta_hat):
      c_bar_hat      — sup ||(1/S) Σ ∇_x f_ζ(x)||₂ (якобиан функции-среднего)
      c_bar_zeta_hat — среднее по сидам нижних оценок c_lower(f_ζ)
    """
    bs = bs or BoundSettings()
    acc = SupAccumulator()
    streams = [iter_input_jacobians(m, samples, bs.chunk) for m in e.members]
    for parts in zip(*streams):
        mean_jac = np.mean([jacs for _, jacs in parts], axis=0)
        acc.push(spectral_norms_of(mean_jac, bs))
    if acc.count == 0:
        raise ShapeMismatchError("ensemble_lipschitz_lower: пустой набор объектов")
    per_seed = [lower_bound(m, samples, bs)[0] for m in e.members]
    return acc.best, float(np.mean(per_seed))


@dataclass(frozen=True)
class EstimateConstants:
    """Константы, подставляемые в оценки дисперсии"""
    source: Literal["lower", "upper"]
    c_bar: float
    c_bar_zeta: float


def lower_constants(e: SeedEnsemble, samples, bs: BoundSettings | None = None) -> EstimateConstants:
    c_bar, c_bar_zeta = ensemble_lipschitz_lower(e, samples, bs)
    return EstimateConstants("lower", c_bar, c_bar_zeta)


def upper_constants(e: SeedEnsemble, bs: BoundSettings | None = None) -> EstimateConstants:
    """
    C̄ — среднее c_upper по сидам (мажорирует константу функции-среднего),
    C̄_ζ — среднеквадратичное c_upper (мажорирует E_ζ C_ζ², поэтому v1 — теорема).
    """
    bs = bs or BoundSettings()
    uppers = np.array([upper_bound(m, bs.power) for m in e.members])
    return EstimateConstants("upper", float(np.mean(uppers)), float(np.sqrt(np.mean(uppers ** 2))))


# ────────────────────────────────────────────────
# Оценки дисперсии
# ────────────────────────────────────────────────

def resolve_xprime(kind: str, test_x, seed: int = 0) -> tuple[np.ndarray, int | None]:
    """x′: ноль или случайная тестовая точка (индекс от seed)"""
    test_x = np.asarray(test_x, dtype=np.float64)
    if kind == "zero":
        return np.zeros(test_x.shape[1]), None
    if kind == "test-point":
        index = int(make_rng(derive_seed(seed, "xprime")).integers(0, test_x.shape[0]))
        return test_x[index].copy(), index
    raise ValueError(f"неизвестный тип x′: {kind!r} (ожидалось {' | '.join(XPRIME_KINDS)})")


@dataclass(frozen=True)
class VarianceBound:
    bound_v1: float
    bound_v2: float
    var_at_xprime: float
    mean_sq_dist: float


def variance_at(e: SeedEnsemble, x) -> float:
    """Var_ζ f(x, ζ) = (1/S) Σ ||f_ζ(x) − f̄(x)||²"""
    outs = e.outputs(np.asarray(x, dtype=np.float64).reshape(1, -1))[:, 0, :]
    return float(np.mean(np.sum((outs - outs.mean(axis=0)) ** 2, axis=-1)))


def variance_bound(e: SeedEnsemble, test_x, xprime, constants: EstimateConstants) -> VarianceBound:
    """
    v1 = 3 (C̄² + C̄_ζ²) E||x − x′||² + 3 Var_ζ f(x′)
    v2 = 6 C̄_ζ² E||x − x′||² + 3 Var_ζ f(x′)
    """
    test_x = np.asarray(test_x, dtype=np.float64)
    xprime = np.asarray(xprime, dtype=np.float64).ravel()
    if test_x.ndim != 2 or xprime.size != test_x.shape[1]:
        raise ShapeMismatchError(f"размерность x′ {xprime.size} ≠ размерности входа {test_x.shape[-1]}")
    mean_sq_dist = float(np.mean(np.sum((test_x - xprime[None]) ** 2, axis=1)))
    var_xp = variance_at(e, xprime)
    c, cz = constants.c_bar, constants.c_bar_zeta
    v1 = 3.0 * (c * c + cz * cz) * mean_sq_dist + 3.0 * var_xp
    v2 = 6.0 * cz * cz * mean_sq_dist + 3.0 * var_xp
    return VarianceBound(v1, v2, var_xp, mean_sq_dist)


# ────────────────────────────────────────────────
# Отчёт
# ────────────────────────────────────────────────

class BiasVarReport(BaseModel):
    width: int | None = None
    seeds: list[int]
    bias_sq: float
    variance: float
    expected_test_loss: float
    r_sq: float
    mean_sq_dist: float
    c_bar: float
    c_bar_zeta: float
    c_bar_upper: float
    c_bar_zeta_upper: float
    var_at_xprime: float
    bound_v1_lower: float
    bound_v2_lower: float
    bound_v1_upper: float
    bound_v2_upper: float
    xprime_kind: str
    xprime_index: int | None = None

    @property
    def bound_v1(self) -> float:
        return self.bound_v1_lower

    @property
    def bound_v2(self) -> float:
        return self.bound_v2_lower

    def dominance(self, source: str = "lower") -> tuple[float, float]:
        """(v1 / variance, v2 / variance); inf при нулевой дисперсии"""
        v1 = getattr(self, f"bound_v1_{source}")
        v2 = getattr(self, f"bound_v2_{source}")
        if self.variance == 0:
            return float("inf"), float("inf")
        return v1 / self.variance, v2 / self.variance

    def csv_row(self) -> dict:
        row = {k: getattr(self, k) for k in BIASVAR_COLUMNS if k not in ("test_loss",)}
        row["test_loss"] = self.expected_test_loss
        return row


def build_reports(e: SeedEnsemble, test_x, test_y, bs: BoundSettings | None = None,
                  xprime_kinds=XPRIME_KINDS, xprime_seed: int = 0,
                  width: int | None = None) -> list[BiasVarReport]:
    """Отчёт на каждый тип x′; константы считаются один раз"""
    bs = bs or BoundSettings()
    test_x = np.asarray(test_x, dtype=np.float64)
    test_x = test_x.reshape(test_x.shape[0], -1)
    bias_sq, variance, expected = decompose(e, test_x, test_y)
    low = lower_constants(e, test_x, bs)
    up = upper_constants(e, bs)
    r_sq = float(np.mean(np.sum(test_x ** 2, axis=1)))

    reports = []
    for kind in xprime_kinds:
        xp, index = resolve_xprime(kind, test_x, xprime_seed)
        b_low = variance_bound(e, test_x, xp, low)
        b_up = variance_bound(e, test_x, xp, up)
        reports.append(BiasVarReport(
            width=width, seeds=e.seeds, bias_sq=bias_sq, variance=variance, expected_test_loss=expected,
            r_sq=r_sq, mean_sq_dist=b_low.mean_sq_dist,
            c_bar=low.c_bar, c_bar_zeta=low.c_bar_zeta,
            c_bar_upper=up.c_bar, c_bar_zeta_upper=up.c_bar_zeta,
            var_at_xprime=b_low.var_at_xprime,
            bound_v1_lower=b_low.bound_v1, bound_v2_lower=b_low.bound_v2,
            bound_v1_upper=b_up.bound_v1, bound_v2_upper=b_up.bound_v2,
            xprime_kind=kind, xprime_index=index,
        ))
        ratio_low = reports[-1].dominance("lower")
        log_soft(f"[BIASVAR] width={width} x′={kind}: var={variance:.6g} "
                 f"v1_lower/var={ratio_low[0]:.3g} v1_upper={b_up.bound_v1:.6g}")
    return reports


# ────────────────────────────────────────────────
# Обучение ансамбля и свип по ширине
# ────────────────────────────────────────────────

def train_ensemble(arch, train_set, setup: TrainSetup, seeds: list[int], test_set=None,
                   workers: int = 1, trace_dir: Path | None = None, tag: str = "") -> SeedEnsemble:
    """Члены ансамбля обучаются параллельно в пуле потоков; порядок — как в seeds"""

    def run(seed: int) -> Network:
        net = init(arch, seed)
        trace_path = trace_dir / f"{tag}_seed{seed}.jsonl" if trace_dir is not None else None
        fit(net, train_set, setup, seed, test_set, trace_path=trace_path, tag=f"{tag} seed={seed}")
        return net

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        members = list(executor.map(run, seeds))
    return SeedEnsemble(members)


def sweep_biasvar(widths: list[int], train_set, test_set, setup: TrainSetup, seeds: list[int],
                  bs: BoundSettings | None = None, xprime_kinds=XPRIME_KINDS, xprime_seed: int = 0,
                  workers: int = 1, out_dir: Path | None = None) -> list[BiasVarReport]:
    """
    Один ансамбль FF ReLU (1 скрытый слой) на ширину. Ошибки обучения записываются
    в failures.jsonl, свип продолжается. При out_dir пишет biasvar.csv.
    """
    reports: list[BiasVarReport] = []
    failures = MetricsLog(out_dir / "failures.jsonl") if out_dir is not None else None
    trace_dir = out_dir / "traces" if out_dir is not None else None

    for width in widths:
        arch = FFArch((width,), train_set.input_dim, train_set.num_classes)
        tag = f"biasvar_{width}"
        try:
            ensemble = train_ensemble(arch, train_set, setup, seeds, test_set, workers, trace_dir, tag)
            reports.extend(build_reports(ensemble, test_set.inputs, test_set.labels, bs,
                                         xprime_kinds, xprime_seed, width))
        except LipddError as e:
            log_main(f"[BIASVAR] width={width}: ошибка: {e}")
            if failures is not None:
                failures.append_jsonl({"axis": "biasvar", "value": width, "error": str(e),
                                       "type": type(e).__name__})
            continue
        log_both(f"[BIASVAR] width={width} готово ({len(seeds)} сидов)")

    if out_dir is not None:
        write_csv(out_dir / "biasvar.csv", [r.csv_row() for r in reports], BIASVAR_COLUMNS)
    return reports
