"""
lipdd — точка входа командной строки

Подкоманды:
  train           — одна ячейка (значение оси, сид): трасса + чекпоинт
  sweep           — свип по оси (width | depth | samples | noise | optimizer | loss)
  bounds          — оценки Липшица чекпоинта → JSON в stdout
  biasvar         — bias² / variance / оценки дисперсии по ширинам → biasvar.csv
  emit-plot-data  — CSV для графика из готового каталога прогона

Коды выхода: 0 — успех, 1 — ошибка конфигурации или аргументов, 2 — ошибка выполнения.
"""

from __future__ import annotations

import argparse
import sys
import traceback
from pathlib import Path

from app_logger import init_logger, log_both, log_main, shutdown_logger
from biasvar import sweep_biasvar
from config import (
    AXES,
    ExperimentConfig,
    config_hash,
    default_profile,
    env_settings,
    load_config,
    log_config_summary,
)
from data import load_dataset
from errors import ConfigError, LipddError
from harness import (
    PLOT_KINDS,
    RECORDS_FILE,
    SUMMARY_FILE,
    SWEEPS,
    Cell,
    SweepContext,
    axis_values,
    bound_settings,
    emit_plot_data,
    plot_source,
    run_cell,
)
from lipschitz import ProbeSet, lipschitz_report, log_report
from metrics_log import MetricsLog, read_csv, read_jsonl
from model import load_checkpoint
from require_utils import initialize_app_structure, prepare_run_dir, run_dir_for
from run_lock import RunDirLock
from train import training_setup

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Ошибки разбора → код 1 (а не 2, как у argparse по умолчанию)"""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: ошибка: {message}", file=sys.stderr)
        raise CliUsageError(message)


# ==============================
# Аргументы
# ==============================

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="INI-файл эксперимента")
    common.add_argument("--profile", help="пресет из profiles/ (desk | full)")
    common.add_argument("-o", "--override", action="append", default=[], metavar="KEY=VALUE",
                        help="переопределение section.key=value (можно повторять)")
    common.add_argument("--out-dir", type=Path, help="корень каталогов прогонов (иначе LIPDD_RUNS_DIR)")
    common.add_argument("--workers", type=int, help="число потоков (иначе LIPDD_WORKERS)")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = _Parser(prog="lipdd", description="Lipschitz bounds, double descent, bias-variance")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="обучить одну ячейку")
    p.add_argument("--axis", choices=AXES)
    p.add_argument("--value", help="значение оси (по умолчанию первое из конфига)")
    p.add_argument("--seed", type=int)

    p = sub.add_parser("sweep", parents=[common], help="свип по оси")
    p.add_argument("--axis", choices=AXES)

    p = sub.add_parser("bounds", parents=[common], help="оценки Липшица чекпоинта")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", help="путь к данным (CSV MNIST1D или каталог CIFAR-10)")
    p.add_argument("--probe", action="store_true", help="считать c_probe по набору S*")
    p.add_argument("--pairs-per-lambda", type=int)
    p.add_argument("--probe-seed", type=int)
    p.add_argument("--softmax", action="store_true", help="добавить оценку для softmax ∘ f")

    p = sub.add_parser("biasvar", parents=[common], help="bias-variance по ширинам")

    p = sub.add_parser("emit-plot-data", help="CSV для графика из каталога прогона")
    p.add_argument("--run-dir", type=Path, required=True)
    p.add_argument("--kind", choices=list(PLOT_KINDS), required=True)
    p.add_argument("--out", type=Path)
    p.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def infer_source(path: str) -> str:
    p = Path(path)
    if p.is_dir() and (p / "data_batch_1.bin").exists():
        return "cifar10"
    return "mnist1d"


def cli_overrides(args) -> list[str]:
    overrides = list(args.override)
    if getattr(args, "data", None):
        overrides += [f"data.path={args.data}"]
        if not any(o.startswith("data.source=") for o in overrides):
            overrides += [f"data.source={infer_source(args.data)}"]
    if getattr(args, "probe", False):
        overrides.append("bounds.probe=true")
    if getattr(args, "pairs_per_lambda", None) is not None:
        overrides.append(f"bounds.pairs_per_lambda={args.pairs_per_lambda}")
    if getattr(args, "probe_seed", None) is not None:
        overrides.append(f"bounds.probe_seed={args.probe_seed}")
    if getattr(args, "softmax", False):
        overrides.append("bounds.softmax=true")
    return overrides


def resolve_data_path(cfg: ExperimentConfig, data_dir: Path) -> ExperimentConfig:
    """Относительный data.path, которого нет в cwd, ищется в LIPDD_DATA_DIR"""
    path = cfg.data.path
    if path is None or Path(path).is_absolute() or Path(path).exists():
        return cfg
    candidate = Path(data_dir) / path
    if not candidate.exists():
        return cfg
    return cfg.model_copy(update={"data": cfg.data.model_copy(update={"path": str(candidate)})})


# ==============================
# Подкоманды
# ==============================

def parse_axis_value(cfg: ExperimentConfig, axis: str, raw: str | None):
    values = axis_values(cfg, axis)
    if raw is None:
        if not values:
            raise ConfigError(f"axis.{axis}", "список значений оси пуст")
        return values[0]
    for v in values:
        if str(v) == raw:
            return v
    if axis in ("width", "depth", "samples"):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError("--value", f"ожидалось целое, получено {raw!r}") from None
    if axis == "noise":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError("--value", f"ожидалось число, получено {raw!r}") from None
    return raw


def cmd_train(args, cfg: ExperimentConfig, run_dir: Path, workers: int) -> int:
    axis = args.axis or cfg.experiment.axis
    value = parse_axis_value(cfg, axis, args.value)
    seed = args.seed if args.seed is not None else cfg.experiment.seeds[0]
    train_set, test_set = load_dataset(cfg.data)
    result = run_cell(Cell(axis, value, seed), SweepContext(cfg, config_hash(cfg), train_set, test_set, run_dir))
    log = MetricsLog(run_dir / RECORDS_FILE)
    for r in result.records:
        log.append_jsonl(r.model_dump())
    log_both(f"[CLI] train: {result.cell.name} ({result.stop_reason}), записей: {len(result.records)}")
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig, run_dir: Path, workers: int) -> int:
    result = SWEEPS[args.axis or cfg.experiment.axis](cfg, run_dir, workers)
    if not result.records:
        log_main("[CLI] sweep: ни одна ячейка не завершилась")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_bounds(args, cfg: ExperimentConfig, run_dir: Path, workers: int) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    train_set, test_set = load_dataset(cfg.data)
    probe = None
    if cfg.bounds.probe:
        probe = ProbeSet(train_set.inputs, test_set.inputs, cfg.bounds.pairs_per_lambda, seed=cfg.bounds.probe_seed)
    report = lipschitz_report(ckpt.net, train_set.inputs, bound_settings(cfg), probe=probe,
                              softmax_composed=cfg.bounds.softmax,
                              epoch=ckpt.epoch)
    log_report(report, args.checkpoint.name)
    payload = report.model_dump_json()
    (run_dir / "bounds.json").write_text(payload + "\n", encoding="utf-8")
    print(payload)
    return EXIT_OK


def cmd_biasvar(args, cfg: ExperimentConfig, run_dir: Path, workers: int) -> int:
    train_set, test_set = load_dataset(cfg.data)
    setup = training_setup(cfg.train, "ff", train_set.n, loss="mse")
    reports = sweep_biasvar(cfg.biasvar.widths, train_set, test_set, setup, cfg.biasvar.seeds,
                            bound_settings(cfg), cfg.biasvar.xprime, cfg.biasvar.xprime_seed,
                            workers, run_dir)
    return EXIT_OK if reports else EXIT_RUNTIME


def cmd_emit_plot_data(args) -> int:
    source = plot_source(args.kind)
    if source == "records":
        table = read_jsonl(args.run_dir / RECORDS_FILE)
    elif source == "biasvar":
        table = read_csv(args.run_dir / "biasvar.csv")
    else:
        table = read_csv(args.run_dir / SUMMARY_FILE)
    out = args.out or args.run_dir / f"plot_{args.kind}.csv"
    emit_plot_data(table, args.kind, out)
    log_main(f"[CLI] данные графика: {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "sweep": cmd_sweep,
    "bounds": cmd_bounds,
    "biasvar": cmd_biasvar,
}


# ==============================
# MAIN
# ==============================

def main(argv: list[str] | None = None) -> int:
    # 1. Аргументы
    try:
        args = build_parser().parse_args(argv)
    except CliUsageError:
        return EXIT_CONFIG

    try:
        env = env_settings()
        verbosity = min(2, env.log_level + args.verbose)

        if args.command == "emit-plot-data":
            init_logger(None, verbosity)
            try:
                return cmd_emit_plot_data(args)
            finally:
                shutdown_logger()

        # 2. Конфигурация: профиль ← файл ← переопределения
        initialize_app_structure()
        profile = args.profile or default_profile()
        cfg = load_config(args.config, profile, cli_overrides(args))
        cfg = resolve_data_path(cfg, env.data_dir)
    except ConfigError as e:
        print(f"[CONFIG] ошибка конфигурации: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except LipddError as e:
        print(f"[CLI] ошибка: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as e:
        print(f"[CLI] ошибка ввода-вывода: {e}", file=sys.stderr)
        return EXIT_RUNTIME

    # 3. Каталог прогона: эффективный конфиг и версия пишутся до начала работы
    workers = args.workers or env.workers
    run_dir = run_dir_for(args.out_dir or env.runs_dir, cfg)
    try:
        prepare_run_dir(run_dir, cfg)
        init_logger(run_dir, verbosity)
        log_config_summary(cfg, config_hash(cfg), workers)
        log_both(f"===== lipdd {args.command} → {run_dir} =====")

        # 4. Работа под замком каталога
        with RunDirLock(run_dir):
            code = COMMANDS[args.command](args, cfg, run_dir, workers)
    except ConfigError as e:
        log_main(f"[CONFIG] ошибка конфигурации: {e}")
        code = EXIT_CONFIG
    except (LipddError, OSError) as e:
        log_main(f"[CLI] ошибка выполнения: {e}")
        code = EXIT_RUNTIME
    except Exception:
        log_main("[CRITICAL] непредвиденная ошибка:\n" + traceback.format_exc())
        code = EXIT_RUNTIME
    finally:
        log_both(f"===== lipdd {args.command} завершён =====")
        shutdown_logger()
    return code


# ==============================
# ENTRY POINT
# ==============================

if __name__ == "__main__":
    sys.exit(main())
