"""
harness.py — оркестрация экспериментов: свипы по ширине / глубине / числу объектов /
шуму меток / оптимизатору / loss, усреднение по сидам, порог интерполяции
и выгрузка таблиц под графики.

Ячейка свипа = (значение оси, сид). Ячейки независимы и выполняются в пуле потоков;
результаты собираются в порядке ячеек, поэтому выходные файлы детерминированы.
Структура каталога прогона:
    records.jsonl, summary.csv, failures.jsonl,
    traces/<axis>_<value>_seed<k>.jsonl, checkpoints/<axis>_<value>_seed<k>.json
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from app_logger import log_both, log_main, log_soft
from biasvar import SeedEnsemble, ensemble_lipschitz_lower
from config import ExperimentConfig, config_hash
from core_math import PowerIterSettings
from data import Dataset, load_dataset, shuffle_labels, subsample
from errors import ConfigError, EmptyTableError, LipddError, PlotKindError
from lipschitz import BoundSettings, LipschitzReport, ProbeSet, lipschitz_report
from losses import LossKind, parse_loss_kind
from metrics_log import MetricsLog, read_csv, write_csv
from model import Arch, CnnArch, FFArch, Network, init, save_checkpoint
from train import EpochRecord, TrainSetup, fit, training_setup

RECORDS_FILE = "records.jsonl"
SUMMARY_FILE = "summary.csv"
FAILURES_FILE = "failures.jsonl"

SUMMARY_METRICS = (
    "train_loss", "test_loss", "train_acc", "c_lower", "c_avg_norm", "c_upper",
    "c_probe", "c_lower_softmax", "param_dist", "grad_norm",
)


# ────────────────────────────────────────────────
# Порог интерполяции
# ────────────────────────────────────────────────

def _arch_for_width(width: int, input_dim: int, output_dim: int, depth: int, family: str) -> Arch:
    if family == "cnn":
        return CnnArch(width, output_dim=output_dim)
    return FFArch((width,) * depth, input_dim, output_dim)


def interpolation_threshold(n_samples: int, input_dim: int, output_dim: int, loss: LossKind | str,
                            depth: int = 1, family: str = "ff") -> int:
    """
    Наименьшая ширина w с param_count(w) ≥ n (CE) или K·n (MSE).
    param_count растёт по w, поэтому поиск — удвоение и бисекция.
    """
    kind = parse_loss_kind(loss)
    target = n_samples if kind == LossKind.CE else output_dim * n_samples

    def count(w: int) -> int:
        return _arch_for_width(w, input_dim, output_dim, depth, family).param_count

    hi = 1
    while count(hi) < target:
        hi *= 2
    lo = hi // 2 + 1 if hi > 1 else 1
    while lo < hi:
        mid = (lo + hi) // 2
        if count(mid) >= target:
            hi = mid
        else:
            lo = mid + 1
    return hi


# ────────────────────────────────────────────────
# Записи
# ────────────────────────────────────────────────

class SweepRecord(BaseModel):
    config_hash: str
    axis: str
    value: int | float | str
    seed: int
    epoch: int
    param_count: int
    train_loss: float
    test_loss: float | None = None
    train_acc: float
    grad_norm: float
    eta: float
    param_dist: float
    c_lower: float
    c_avg_norm: float
    c_upper: float
    c_probe: float | None = None
    c_lower_softmax: float | None = None
    probe_fidelity: float | None = None
    probe_breakdown: list[dict] | None = None

    @classmethod
    def from_parts(cls, run_hash: str, axis: str, value, seed: int, param_count: int,
                   rec: EpochRecord, report: LipschitzReport) -> "SweepRecord":
        return cls(
            config_hash=run_hash, axis=axis, value=value, seed=seed, epoch=rec.epoch,
            param_count=param_count, train_loss=rec.train_loss, test_loss=rec.test_loss,
            train_acc=rec.train_acc, grad_norm=rec.grad_norm, eta=rec.eta, param_dist=rec.param_dist,
            c_lower=report.c_lower, c_avg_norm=report.c_avg_norm, c_upper=report.c_upper,
            c_probe=report.c_probe, c_lower_softmax=report.c_lower_softmax,
            probe_fidelity=report.probe_fidelity, probe_breakdown=report.probe_breakdown,
        )


# ────────────────────────────────────────────────
# Ячейки
# ────────────────────────────────────────────────

@dataclass(frozen=True)
class Cell:
    axis: str
    value: int | float | str
    seed: int

    @property
    def name(self) -> str:
        return f"{self.axis}_{self.value}_seed{self.seed}"


@dataclass
class CellResult:
    cell: Cell
    records: list[SweepRecord]
    net: Network
    train_inputs: np.ndarray
    stop_reason: str


@dataclass
class SweepResult:
    axis: str
    records: list[SweepRecord] = field(default_factory=list)
    summary: list[dict] = field(default_factory=list)
    failures: list[dict] = field(default_factory=list)


def axis_values(cfg: ExperimentConfig, axis: str) -> list:
    if axis == "width":
        return list(cfg.model.widths)
    if axis == "depth":
        return list(cfg.model.depths)
    if axis == "samples":
        return list(cfg.data.sample_sizes)
    if axis == "noise":
        return list(cfg.data.noise_levels)
    if axis == "optimizer":
        return list(cfg.experiment.optimizers)
    if axis == "loss":
        return list(cfg.experiment.losses)
    raise ConfigError("experiment.axis", f"неизвестная ось {axis!r}")


def cell_arch(cfg: ExperimentConfig, axis: str, value, input_dim: int, output_dim: int) -> Arch:
    family = cfg.model.family
    if axis == "depth":
        if family != "ff":
            raise ConfigError("model.family", "ось depth поддерживается только для ff")
        return FFArch((cfg.model.depth_width,) * int(value), input_dim, output_dim)
    width = int(value) if axis == "width" else cfg.model.base_width
    if family == "cnn":
        return CnnArch(width, output_dim=output_dim)
    return FFArch((width,), input_dim, output_dim)


def cell_data(cfg: ExperimentConfig, axis: str, value, train_set: Dataset, test_set: Dataset) -> tuple[Dataset, Dataset]:
    """Мутация данных, задаваемая осью (samples / noise); остальные оси данные не меняют"""
    if axis == "samples":
        if not 1 <= int(value) <= train_set.n:
            raise ConfigError("data.sample_sizes", f"размер {value} вне [1, {train_set.n}]")
        return subsample(train_set, int(value), cfg.data.subsample_seed), test_set
    if axis == "noise" and float(value) > 0:
        train_set = shuffle_labels(train_set, float(value), cfg.data.shuffle_seed)
        if cfg.data.corrupt_test:
            test_set = shuffle_labels(test_set, float(value), cfg.data.shuffle_seed)
    return train_set, test_set


def cell_setup(cfg: ExperimentConfig, axis: str, value, n_train: int) -> TrainSetup:
    loss = str(value) if axis == "loss" else None
    optimizer = str(value) if axis == "optimizer" else None
    return training_setup(cfg.train, cfg.model.family, n_train, loss=loss, optimizer=optimizer)


def bound_settings(cfg: ExperimentConfig) -> BoundSettings:
    power = PowerIterSettings(max_iters=cfg.bounds.max_iters, rel_tol=cfg.bounds.rel_tol,
                              seed=cfg.bounds.power_seed)
    return BoundSettings(method=cfg.bounds.method, power=power, chunk=cfg.bounds.chunk)


@dataclass
class SweepContext:
    cfg: ExperimentConfig
    run_hash: str
    train_set: Dataset
    test_set: Dataset
    run_dir: Path | None = None


def run_cell(cell: Cell, ctx: SweepContext) -> CellResult:
    """
    Обучает одну сеть. Оценки Липшица — на эпохе 0, каждые eval_every эпох и на финальной;
    пробный набор S* и softmax-композиция — только на финальной.
    """
    cfg = ctx.cfg
    train_set, test_set = cell_data(cfg, cell.axis, cell.value, ctx.train_set, ctx.test_set)
    arch = cell_arch(cfg, cell.axis, cell.value, train_set.input_dim, train_set.num_classes)
    setup = cell_setup(cfg, cell.axis, cell.value, train_set.n)
    bs = bound_settings(cfg)
    softmax = setup.kind == LossKind.CE and (cfg.bounds.softmax or cell.axis == "loss")
    every = cfg.experiment.eval_every

    net = init(arch, cell.seed)
    records: list[SweepRecord] = []

    def record(epoch: int, current: Network, rec: EpochRecord, final: bool = False):
        probe = None
        if final and cfg.bounds.probe:
            probe = ProbeSet(train_set.inputs, test_set.inputs, cfg.bounds.pairs_per_lambda,
                             seed=cfg.bounds.probe_seed)
        report = lipschitz_report(current, train_set.inputs, bs, probe=probe,
                                  softmax_composed=softmax and final, epoch=epoch)
        records.append(SweepRecord.from_parts(ctx.run_hash, cell.axis, cell.value, cell.seed,
                                              arch.param_count, rec, report))

    def on_epoch(epoch: int, current: Network, rec: EpochRecord):
        if epoch % every == 0:
            record(epoch, current, rec)

    trace_path = ctx.run_dir / "traces" / f"{cell.name}.jsonl" if ctx.run_dir is not None else None
    trace = fit(net, train_set, setup, cell.seed, test_set, callback=on_epoch,
                trace_path=trace_path, tag=cell.name)

    final = trace.final
    if records and records[-1].epoch == final.epoch:
        records.pop()
    record(final.epoch, net, final, final=True)

    if ctx.run_dir is not None and cfg.experiment.save_checkpoints:
        save_checkpoint(net, ctx.run_dir / "checkpoints" / f"{cell.name}.json", final.epoch,
                        meta={"axis": cell.axis, "value": cell.value, "config_hash": ctx.run_hash,
                              "stop_reason": trace.stop_reason})

    log_soft(f"[SWEEP] {cell.name}: epoch={final.epoch} ({trace.stop_reason}) "
             f"test_loss={final.test_loss} c_lower={records[-1].c_lower:.6g}")
    return CellResult(cell, records, net, train_set.inputs, trace.stop_reason)


# ────────────────────────────────────────────────
# Свип
# ────────────────────────────────────────────────

def run_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, axis: str | None = None,
              workers: int = 1, data: tuple[Dataset, Dataset] | None = None) -> SweepResult:
    axis = axis or cfg.experiment.axis
    values = axis_values(cfg, axis)
    train_set, test_set = data if data is not None else load_dataset(cfg.data)
    ctx = SweepContext(cfg, config_hash(cfg), train_set, test_set, Path(run_dir) if run_dir else None)
    cells = [Cell(axis, v, s) for v in values for s in cfg.experiment.seeds]

    if axis == "width":
        w = interpolation_threshold(train_set.n, train_set.input_dim, train_set.num_classes,
                                    cfg.train.loss, family=cfg.model.family)
        log_both(f"[SWEEP] теоретический порог интерполяции: ширина {w}")
    log_both(f"[SWEEP] ось {axis}: {len(values)} значений × {len(cfg.experiment.seeds)} сидов, "
             f"воркеров: {workers}")

    def guarded(cell: Cell) -> CellResult | dict:
        try:
            return run_cell(cell, ctx)
        except LipddError as e:
            log_main(f"[SWEEP] {cell.name}: ошибка: {e}")
            return {"axis": cell.axis, "value": cell.value, "seed": cell.seed,
                    "error": str(e), "type": type(e).__name__}

    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        outcomes = list(executor.map(guarded, cells))

    result = SweepResult(axis)
    done: list[CellResult] = []
    for outcome in outcomes:
        if isinstance(outcome, dict):
            result.failures.append(outcome)
        else:
            done.append(outcome)
            result.records.extend(outcome.records)

    result.summary = summary(result.records, ensemble_lower(done, cfg))
    if ctx.run_dir is not None:
        write_outputs(result, ctx.run_dir)
    log_both(f"[SWEEP] готово: {len(done)} ячеек, ошибок: {len(result.failures)}")
    return result


def run_width_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "width", workers, data)


def run_depth_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "depth", workers, data)


def run_samples_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "samples", workers, data)


def run_noise_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "noise", workers, data)


def run_optimizer_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "optimizer", workers, data)


def run_loss_sweep(cfg: ExperimentConfig, run_dir: Path | None = None, workers: int = 1, data=None) -> SweepResult:
    return run_sweep(cfg, run_dir, "loss", workers, data)


SWEEPS = {
    "width": run_width_sweep,
    "depth": run_depth_sweep,
    "samples": run_samples_sweep,
    "noise": run_noise_sweep,
    "optimizer": run_optimizer_sweep,
    "loss": run_loss_sweep,
}


# ────────────────────────────────────────────────
# Сводка по сидам
# ────────────────────────────────────────────────

def ensemble_lower(done: list[CellResult], cfg: ExperimentConfig) -> dict:
    """sup нормы якобиана функции-среднего по сидам (c_lower_of_mean) для каждого значения оси"""
    by_value: dict = {}
    for res in done:
        by_value.setdefault(res.cell.value, []).append(res)
    out = {}
    bs = bound_settings(cfg)
    for value, group in by_value.items():
        if len(group) < 2:
            out[value] = None
            continue
        ensemble = SeedEnsemble([r.net for r in group])
        out[value] = ensemble_lipschitz_lower(ensemble, group[0].train_inputs, bs)[0]
    return out


def final_records(records: list[SweepRecord]) -> list[SweepRecord]:
    """Последняя записанная эпоха каждой пары (значение, сид), в порядке появления"""
    last: dict = {}
    for r in records:
        last[(r.value, r.seed)] = r
    return list(last.values())


def _stats(values: list) -> tuple:
    present = [v for v in values if v is not None]
    if not present:
        return None, None, None
    return float(np.mean(present)), float(min(present)), float(max(present))


def summary(records: list[SweepRecord], c_lower_of_mean: dict | None = None) -> list[dict]:
    """Строка на значение оси: среднее / min / max по сидам финальных записей"""
    groups: dict = {}
    for r in final_records(records):
        groups.setdefault(r.value, []).append(r)
    rows = []
    for value, group in groups.items():
        row = {"axis": group[0].axis, "value": value, "param_count": group[0].param_count,
               "seeds": len(group), "epoch_mean": float(np.mean([r.epoch for r in group]))}
        for metric in SUMMARY_METRICS:
            mean, lo, hi = _stats([getattr(r, metric) for r in group])
            row[f"{metric}_mean"] = mean
            row[f"{metric}_min"] = lo
            row[f"{metric}_max"] = hi
        row["c_lower_of_mean"] = (c_lower_of_mean or {}).get(value)
        rows.append(row)
    return rows


def summary_columns() -> list[str]:
    cols = ["axis", "value", "param_count", "seeds", "epoch_mean"]
    for metric in SUMMARY_METRICS:
        cols += [f"{metric}_mean", f"{metric}_min", f"{metric}_max"]
    return cols + ["c_lower_of_mean"]


def write_outputs(result: SweepResult, run_dir: Path):
    records_log = MetricsLog(run_dir / RECORDS_FILE)
    records_log.path.write_text("", encoding="utf-8")
    for r in result.records:
        records_log.append_jsonl(r.model_dump())
    failures_log = MetricsLog(run_dir / FAILURES_FILE)
    failures_log.path.write_text("", encoding="utf-8")
    for f in result.failures:
        failures_log.append_jsonl(f)
    write_csv(run_dir / SUMMARY_FILE, result.summary, summary_columns())


# ────────────────────────────────────────────────
# Данные для графиков
# ────────────────────────────────────────────────

PLOT_KINDS: dict[str, tuple[str, list[str]]] = {
    "bounds-vs-width": ("summary", [
        "value", "param_count", "c_avg_norm_mean", "c_lower_mean", "c_lower_min", "c_lower_max",
        "c_probe_mean", "c_upper_mean", "c_lower_of_mean", "train_loss_mean", "test_loss_mean",
    ]),
    "bounds-vs-epoch": ("records", [
        "value", "seed", "epoch", "c_avg_norm", "c_lower", "c_upper", "train_loss", "test_loss",
    ]),
    "variance-vs-width": ("biasvar", [
        "width", "xprime_kind", "bias_sq", "variance", "test_loss",
        "bound_v1_lower", "bound_v2_lower", "bound_v1_upper", "bound_v2_upper",
    ]),
    "param-dist-vs-width": ("summary", [
        "value", "param_count", "param_dist_mean", "param_dist_min", "param_dist_max",
    ]),
    "probe-breakdown": ("records", [
        "value", "seed", "epoch", "source", "lambda", "c_sup", "c_lower", "c_upper",
    ]),
}


def probe_rows(records: list[dict]) -> list[dict]:
    """Разворачивает probe_breakdown записей в строки (значение, сид, источник, λ)"""
    rows = []
    for r in records:
        for cell in r.get("probe_breakdown") or []:
            rows.append({**r, **cell})
    return rows


PLOT_ROWS = {"probe-breakdown": probe_rows}


def plot_source(kind: str) -> str:
    if kind not in PLOT_KINDS:
        raise PlotKindError(f"неизвестный вид графика {kind!r} (допустимы: {', '.join(PLOT_KINDS)})")
    return PLOT_KINDS[kind][0]


def emit_plot_data(table: list[dict], kind: str, path: Path) -> Path:
    """CSV с колонками вида kind; значения без преобразований (лог-шкалы — дело плоттера)"""
    plot_source(kind)
    if not table:
        raise EmptyTableError(f"пустая таблица для {kind}")
    if kind in PLOT_ROWS:
        table = PLOT_ROWS[kind](table)
        if not table:
            raise EmptyTableError(f"в таблице нет данных для {kind}")
    columns = PLOT_KINDS[kind][1]
    rows = [{c: row.get(c) for c in columns} for row in table]
    write_csv(path, rows, columns)
    log_soft(f"[SWEEP] данные графика {kind}: {len(rows)} строк → {path}")
    return Path(path)


def read_plot_data(path: Path) -> list[dict]:
    return read_csv(path)
