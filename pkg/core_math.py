"""
core_math.py — плотная линейная алгебра, сидированный ГСЧ и спектральные нормы.

Все величины анализа — float64. Норма везде 2-норма (наибольшее сингулярное число).
Степенной метод работает и с явной матрицей, и с неявным оператором (apply / apply_adjoint),
так что свёрточные слои не материализуются в тёплицеву матрицу.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import numpy.typing as npt

from app_logger import log_debug
from errors import AdjointCheckError, NonFiniteError, OracleSizeError, ShapeMismatchError

Vector = npt.NDArray[np.float64]
Matrix = npt.NDArray[np.float64]
LinearMap = Callable[[np.ndarray], np.ndarray]

ORACLE_MAX_DIM = 512
ADJOINT_TOL = 1e-8
ADJOINT_PAIRS = 3
RESIDUAL_FLOOR = 1e-12


# ────────────────────────────────────────────────
# ГСЧ
# ────────────────────────────────────────────────

def make_rng(seed: int) -> np.random.Generator:
    """Philox (counter-based): одинаковый seed → одинаковый поток на любой платформе"""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def derive_seed(seed: int, *tags) -> int:
    """Детерминированный дочерний seed по тегам (init / shuffle / probe ...)"""
    words = [int(seed) & 0xFFFF_FFFF]
    words.append((int(seed) >> 32) & 0xFFFF_FFFF)
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFF_FFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf-8")))
    state = np.random.SeedSequence(words).generate_state(2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


# ────────────────────────────────────────────────
# Проверки входа
# ────────────────────────────────────────────────

def as_matrix(m, name: str = "matrix") -> Matrix:
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeMismatchError(f"{name}: ожидалась 2-D матрица, получено ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: есть нечисловые элементы (nan/inf)")
    return arr


def as_vector(v, name: str = "vector") -> Vector:
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1 or arr.size < 1:
        raise ShapeMismatchError(f"{name}: ожидался непустой 1-D вектор, shape={arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: есть нечисловые элементы (nan/inf)")
    return arr


@dataclass(frozen=True)
class PowerIterSettings:
    max_iters: int = 1000
    rel_tol: float = 1e-9
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError(f"max_iters должен быть ≥ 1, получено {self.max_iters}")
        if not self.rel_tol > 0:
            raise ValueError(f"rel_tol должен быть > 0, получено {self.rel_tol}")


# ────────────────────────────────────────────────
# Степенной метод
# ────────────────────────────────────────────────

def _power_iterate(apply: LinearMap, apply_adjoint: LinearMap,
                   in_shape: tuple, s: PowerIterSettings) -> float:
    rng = make_rng(s.seed)
    v = rng.standard_normal(in_shape)
    v /= np.linalg.norm(v)

    sigma_prev = None
    sigma = 0.0
    for it in range(1, s.max_iters + 1):
        u = apply(v)
        sigma = float(np.linalg.norm(u))
        if sigma == 0.0:
            return 0.0
        w = apply_adjoint(u)
        w_norm = float(np.linalg.norm(w))
        if w_norm == 0.0:
            break
        v = w / w_norm
        if sigma_prev is not None and abs(sigma - sigma_prev) <= s.rel_tol * sigma:
            log_debug(f"[POWER] сошлось за {it} итераций: sigma={sigma!r}")
            break
        sigma_prev = sigma

    # ||A v|| при единичном v: оценка снизу
    return float(np.linalg.norm(apply(v)))


def spectral_norm_dense(m, s: PowerIterSettings | None = None) -> float:
    """||m||₂ степенным методом; нулевая матрица → 0"""
    s = s or PowerIterSettings()
    m = as_matrix(m)
    if not np.any(m):
        return 0.0
    return _power_iterate(lambda v: m @ v, lambda u: m.T @ u, (m.shape[1],), s)


def _check_adjoint(apply: LinearMap, apply_adjoint: LinearMap,
                   in_shape: tuple, out_shape: tuple, seed: int):
    rng = make_rng(derive_seed(seed, "adjoint-check"))
    for pair in range(ADJOINT_PAIRS):
        v = rng.standard_normal(in_shape)
        u = rng.standard_normal(out_shape)
        av = np.asarray(apply(v))
        atu = np.asarray(apply_adjoint(u))
        if av.shape != tuple(out_shape) or atu.shape != tuple(in_shape):
            raise ShapeMismatchError(
                f"оператор вернул {av.shape} / {atu.shape}, ожидалось {tuple(out_shape)} / {tuple(in_shape)}"
            )
        lhs = float(np.vdot(av, u))
        rhs = float(np.vdot(v, atu))
        scale = max(1.0, float(np.linalg.norm(av)) * float(np.linalg.norm(u)))
        if abs(lhs - rhs) > ADJOINT_TOL * scale:
            raise AdjointCheckError(pair, lhs, rhs)


def _residual_iterate(apply: LinearMap, apply_adjoint: LinearMap,
                      in_shape: tuple, s: PowerIterSettings) -> float:
    """
    Степенной метод на AᵀA с остановом по невязке r = ||AᵀA v − ρ v||, ρ = ||A v||².
    В пределах r от ρ лежит собственное число AᵀA, поэтому возвращается sqrt(ρ + r):
    при v, сошедшемся к верхнему кластеру, это оценка ||A||₂ сверху.
    """
    tol = max(s.rel_tol, RESIDUAL_FLOOR)
    rng = make_rng(s.seed)
    v = rng.standard_normal(in_shape)
    v /= np.linalg.norm(v)

    rho = r = 0.0
    for it in range(1, s.max_iters + 1):
        u = apply(v)
        rho = float(np.vdot(u, u))
        if rho == 0.0:
            return 0.0
        w = apply_adjoint(u)
        r = float(np.linalg.norm(w - rho * v))
        if r <= tol * rho:
            log_debug(f"[POWER] невязка {r!r} за {it} итераций: rho={rho!r}")
            break
        v = w / np.linalg.norm(w)
    else:
        log_debug(f"[POWER] max_iters={s.max_iters} исчерпан, невязка {r!r} при rho={rho!r}")

    return float(np.sqrt(rho + r))


def spectral_norm_operator(apply: LinearMap, apply_adjoint: LinearMap,
                           in_shape: Sequence[int], out_shape: Sequence[int],
                           s: PowerIterSettings | None = None, upper: bool = False) -> float:
    """
    Наибольшее сингулярное число неявного линейного оператора.
    Перед итерациями вероятностно проверяется сопряжённость apply / apply_adjoint.
    upper=False: ||A v|| (сходится снизу); upper=True: sqrt(ρ + r) с остановом по невязке.
    """
    s = s or PowerIterSettings()
    in_shape = tuple(int(d) for d in in_shape)
    out_shape = tuple(int(d) for d in out_shape)
    _check_adjoint(apply, apply_adjoint, in_shape, out_shape, s.seed)
    if upper:
        return _residual_iterate(apply, apply_adjoint, in_shape, s)
    return _power_iterate(apply, apply_adjoint, in_shape, s)


def materialize_operator(apply: LinearMap, in_shape: Sequence[int],
                         out_shape: Sequence[int]) -> Matrix:
    """Матрица оператора, собранная по столбцам через единичные импульсы"""
    in_shape = tuple(int(d) for d in in_shape)
    n_in = int(np.prod(in_shape))
    n_out = int(np.prod(out_shape))
    mat = np.empty((n_out, n_in), dtype=np.float64)
    impulse = np.zeros(n_in, dtype=np.float64)
    for j in range(n_in):
        impulse[j] = 1.0
        mat[:, j] = np.asarray(apply(impulse.reshape(in_shape)), dtype=np.float64).ravel()
        impulse[j] = 0.0
    return mat


# ────────────────────────────────────────────────
# Оракул: Якоби на матрице Грама
# ────────────────────────────────────────────────

def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Турнирное расписание: n-1 раундов непересекающихся пар (p, q)"""
    players = list(range(n + (n % 2)))
    m = len(players)
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            rounds.append((np.array([p for p, _ in pairs]), np.array([q for _, q in pairs])))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def _jacobi_eigenvalues(g: Matrix, max_sweeps: int = 60, tol: float = 1e-14) -> Vector:
    """
    Циклический метод Якоби для симметричной матрицы.
    Вращения одного раунда не пересекаются по индексам и применяются разом.
    """
    a = g.copy()
    n = a.shape[0]
    if n == 1:
        return np.diag(a).copy()
    rounds = _round_robin(n)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * max(np.linalg.norm(a), np.finfo(float).tiny):
            break
        for p, q in rounds:
            apq = a[p, q]
            active = apq != 0.0
            if not np.any(active):
                continue
            safe_apq = np.where(active, apq, 1.0)
            theta = (a[q, q] - a[p, p]) / (2.0 * safe_apq)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.sqrt(theta * theta + 1.0))
            c = np.where(active, 1.0 / np.sqrt(t * t + 1.0), 1.0)
            sn = np.where(active, t * c, 0.0)
            # A ← Jᵀ A J: сначала столбцы, затем строки
            ap = a[:, p].copy()
            aq = a[:, q].copy()
            a[:, p] = c * ap - sn * aq
            a[:, q] = sn * ap + c * aq
            ap = a[p, :].copy()
            aq = a[q, :].copy()
            a[p, :] = c[:, None] * ap - sn[:, None] * aq
            a[q, :] = sn[:, None] * ap + c[:, None] * aq
    return np.diag(a).copy()


def svd_oracle(m) -> float:
    """Наибольшее сингулярное число точным плотным методом (только тестовые размеры)"""
    m = as_matrix(m)
    rows, cols = m.shape
    if rows > ORACLE_MAX_DIM or cols > ORACLE_MAX_DIM:
        raise OracleSizeError(
            f"svd_oracle: размер {rows}x{cols} больше предела {ORACLE_MAX_DIM}"
        )
    if not np.any(m):
        return 0.0
    gram = m @ m.T if rows <= cols else m.T @ m
    eig = _jacobi_eigenvalues(gram)
    return float(np.sqrt(max(float(eig.max()), 0.0)))


def gram_spectral_norms(mats: np.ndarray) -> Vector:
    """Точные 2-нормы пачки маленьких матриц (N × a × b) через eigvalsh матрицы Грама"""
    mats = np.asarray(mats, dtype=np.float64)
    if mats.shape[1] <= mats.shape[2]:
        gram = mats @ np.swapaxes(mats, 1, 2)
    else:
        gram = np.swapaxes(mats, 1, 2) @ mats
    top = np.linalg.eigvalsh(gram)[:, -1]
    return np.sqrt(np.clip(top, 0.0, None))


def spectral_norm_exact(m) -> float:
    """Точная ||m||₂ через eigvalsh Грама по меньшей стороне; для слоёв в верхней оценке"""
    m = as_matrix(m)
    if m.size == 0 or not np.any(m):
        return 0.0
    return float(gram_spectral_norms(m[None])[0])
