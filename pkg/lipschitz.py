"""
lipschitz.py — оценки константы Липшица сети (в 2-норме).

    c_lower    — sup по обучающей выборке ||∇_x f(x)||₂
    c_avg_norm — среднее той же величины
    c_upper    — произведение спектральных норм слоёв (ReLU и max-pool 1-липшицевы)
    c_probe    — sup по train ∪ test ∪ выпуклым комбинациям пар точек

Нормы якобианов считаются потоково, кусками, с фиксированным порядком редукции.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from pydantic import BaseModel

from app_logger import log_debug, log_soft
from core_math import PowerIterSettings, derive_seed, gram_spectral_norms, make_rng, spectral_norm_dense
from errors import BoundOrderingError, ShapeMismatchError
from losses import softmax
from model import JACOBIAN_CHUNK, Network, iter_input_jacobians, layer_spectral_norms

PROBE_LAMBDAS = (0.1, 0.2, 0.3, 0.4, 0.5)
PROBE_SOURCES = ("train", "test")
ORDER_RTOL = 1e-6
JACOBIAN_METHODS = ("gram", "power")


@dataclass(frozen=True)
class BoundSettings:
    method: str = "gram"
    power: PowerIterSettings = field(default_factory=PowerIterSettings)
    chunk: int = JACOBIAN_CHUNK

    def __post_init__(self):
        if self.method not in JACOBIAN_METHODS:
            raise ValueError(f"method должен быть одним из {JACOBIAN_METHODS}, получено {self.method!r}")


# ────────────────────────────────────────────────
# Нормы якобианов
# ────────────────────────────────────────────────

def spectral_norms_of(jacs: np.ndarray, bs: BoundSettings) -> np.ndarray:
    if bs.method == "gram":
        return gram_spectral_norms(jacs)
    return np.array([spectral_norm_dense(j, bs.power) for j in jacs])


def iter_jacobian_norms(net: Network, samples, bs: BoundSettings | None = None) -> Iterator[np.ndarray]:
    bs = bs or BoundSettings()
    for _, jacs in iter_input_jacobians(net, samples, bs.chunk):
        yield spectral_norms_of(jacs, bs)


def jacobian_norms(net: Network, samples, bs: BoundSettings | None = None) -> np.ndarray:
    parts = list(iter_jacobian_norms(net, samples, bs))
    return np.concatenate(parts) if parts else np.zeros(0)


class SupAccumulator:
    """Потоковые sup (первый максимум) и сумма"""

    def __init__(self):
        self.best = -np.inf
        self.argmax = -1
        self.total = 0.0
        self.count = 0

    def push(self, norms: np.ndarray):
        if norms.size == 0:
            return
        i = int(np.argmax(norms))
        if norms[i] > self.best:
            self.best = float(norms[i])
            self.argmax = self.count + i
        self.total += float(np.sum(norms))
        self.count += norms.size


def lower_bound(net: Network, samples, bs: BoundSettings | None = None) -> tuple[float, float, int]:
    """(c_lower, c_avg, индекс максимизирующего объекта)"""
    acc = SupAccumulator()
    for norms in iter_jacobian_norms(net, samples, bs):
        acc.push(norms)
    if acc.count == 0:
        raise ShapeMismatchError("lower_bound: пустой набор объектов")
    return acc.best, acc.total / acc.count, acc.argmax


def upper_bound(net: Network, s: PowerIterSettings | None = None) -> float:
    return float(np.prod(layer_spectral_norms(net, s)))


# ────────────────────────────────────────────────
# Пробный набор S*
# ────────────────────────────────────────────────

@dataclass
class ProbeSet:
    """
    train ∪ test ∪ {λ·x_i + (1−λ)·x_j}: для каждого источника и каждого λ —
    pair_count пар, индексы с возвращением из seeded ГСЧ.
    """
    train: np.ndarray
    test: np.ndarray
    pair_count: int
    seed: int = 0
    lambdas: tuple[float, ...] = PROBE_LAMBDAS
    pairs: dict[tuple[str, float], tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.float64)
        self.test = np.asarray(self.test, dtype=np.float64)
        if self.pair_count < 0:
            raise ValueError(f"pair_count должен быть ≥ 0, получено {self.pair_count}")
        if not self.pairs:
            for source in PROBE_SOURCES:
                base = self._source(source)
                for k, lam in enumerate(self.lambdas):
                    rng = make_rng(derive_seed(self.seed, "probe", source, k))
                    i = rng.integers(0, base.shape[0], size=self.pair_count)
                    j = rng.integers(0, base.shape[0], size=self.pair_count)
                    self.pairs[(source, lam)] = (i, j)

    def _source(self, source: str) -> np.ndarray:
        return self.train if source == "train" else self.test

    @property
    def size(self) -> int:
        return self.train.shape[0] + self.test.shape[0] + len(PROBE_SOURCES) * len(self.lambdas) * self.pair_count

    def combos(self, source: str, lam: float, chunk: int = JACOBIAN_CHUNK) -> Iterator[np.ndarray]:
        base = self._source(source)
        i, j = self.pairs[(source, lam)]
        for start in range(0, i.size, chunk):
            ii, jj = i[start:start + chunk], j[start:start + chunk]
            yield lam * base[ii] + (1.0 - lam) * base[jj]

    def cells(self, chunk: int = JACOBIAN_CHUNK) -> Iterator[tuple[str, float | None, Iterator[np.ndarray]]]:
        """(источник, λ или None для исходных точек, куски объектов)"""
        yield "train", None, iter([self.train])
        yield "test", None, iter([self.test])
        for source in PROBE_SOURCES:
            for lam in self.lambdas:
                yield source, lam, self.combos(source, lam, chunk)


def _cell_sup(net: Network, chunks: Iterator[np.ndarray], bs: BoundSettings) -> float | None:
    acc = SupAccumulator()
    for part in chunks:
        if part.shape[0] == 0:
            continue
        for norms in iter_jacobian_norms(net, part, bs):
            acc.push(norms)
    return acc.best if acc.count else None


def probe_breakdown(net: Network, p: ProbeSet, bs: BoundSettings | None = None) -> list[dict]:
    """sup нормы якобиана по каждой клетке (источник, λ)"""
    bs = bs or BoundSettings()
    rows = []
    for source, lam, chunks in p.cells(bs.chunk):
        sup = _cell_sup(net, chunks, bs)
        if sup is not None:
            rows.append({"source": source, "lambda": lam, "c_sup": sup})
    return rows


def probe_bound(net: Network, p: ProbeSet, bs: BoundSettings | None = None) -> float:
    rows = probe_breakdown(net, p, bs)
    return max(r["c_sup"] for r in rows)


# ────────────────────────────────────────────────
# Композиция с softmax
# ────────────────────────────────────────────────

def softmax_jacobian(p: np.ndarray) -> np.ndarray:
    """diag(p) − p pᵀ для пачки вероятностей (N × K) → N × K × K"""
    return p[:, :, None] * np.eye(p.shape[1])[None] - p[:, :, None] * p[:, None, :]


def softmax_composed_lower_bound(net: Network, samples, bs: BoundSettings | None = None) -> float:
    bs = bs or BoundSettings()
    if net.output_dim < 2:
        raise ShapeMismatchError("softmax-композиция требует output_dim ≥ 2")
    x = net.prepare(samples)
    acc = SupAccumulator()
    for start, jacs in iter_input_jacobians(net, x, bs.chunk):
        out = net.forward_cache(x[start:start + jacs.shape[0]])[0]
        composed = softmax_jacobian(softmax(out)) @ jacs
        acc.push(spectral_norms_of(composed, bs))
    if acc.count == 0:
        raise ShapeMismatchError("softmax_composed_lower_bound: пустой набор объектов")
    return acc.best


# ────────────────────────────────────────────────
# Отчёт
# ────────────────────────────────────────────────

class LipschitzReport(BaseModel):
    c_lower: float
    c_avg_norm: float
    c_upper: float
    c_probe: float | None = None
    c_lower_softmax: float | None = None
    softmax_composed: bool = False
    probe_fidelity: float | None = None
    probe_breakdown: list[dict] | None = None
    argmax_index: int = -1
    arch: dict
    seed: int
    epoch: int

    def check_ordering(self, rtol: float = ORDER_RTOL):
        chain = [("c_avg_norm", self.c_avg_norm), ("c_lower", self.c_lower)]
        if self.c_probe is not None:
            chain.append(("c_probe", self.c_probe))
        chain.append(("c_upper", self.c_upper))
        for (name_a, a), (name_b, b) in zip(chain, chain[1:]):
            if a > b + rtol * max(abs(a), abs(b)):
                raise BoundOrderingError(f"{name_a}={a!r} > {name_b}={b!r} (epoch {self.epoch}, seed {self.seed})")


def lipschitz_report(net: Network, train, bs: BoundSettings | None = None,
                     probe: ProbeSet | None = None, softmax_composed: bool = False,
                     epoch: int = 0) -> LipschitzReport:
    bs = bs or BoundSettings()
    c_lower, c_avg, argmax = lower_bound(net, train, bs)
    c_upper = upper_bound(net, bs.power)

    c_probe = fidelity = breakdown = None
    if probe is not None:
        breakdown = probe_breakdown(net, probe, bs)
        c_probe = max(r["c_sup"] for r in breakdown)
        gap = c_upper - c_lower
        fidelity = (c_probe - c_lower) / gap if gap > 0 else None

    c_soft = softmax_composed_lower_bound(net, train, bs) if softmax_composed else None

    report = LipschitzReport(
        c_lower=c_lower, c_avg_norm=c_avg, c_upper=c_upper, c_probe=c_probe,
        c_lower_softmax=c_soft, softmax_composed=softmax_composed, probe_fidelity=fidelity,
        probe_breakdown=breakdown, argmax_index=argmax, arch=net.arch.to_dict(), seed=net.seed, epoch=epoch,
    )
    report.check_ordering()
    log_debug(f"[BOUNDS] epoch={epoch} seed={net.seed}: lower={c_lower:.6g} avg={c_avg:.6g} "
              f"upper={c_upper:.6g} probe={c_probe}")
    return report


def log_report(report: LipschitzReport, tag: str = ""):
    log_soft(f"[BOUNDS] {tag} epoch={report.epoch}: c_avg={report.c_avg_norm:.6g} "
             f"c_lower={report.c_lower:.6g} c_upper={report.c_upper:.6g}"
             + (f" c_probe={report.c_probe:.6g}" if report.c_probe is not None else ""))
