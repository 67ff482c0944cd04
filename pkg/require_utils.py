# require_utils.py
"""
Подготовка файлов и папок: шаблоны приложения (settings.ini, .env)
и структура каталога прогона (traces/, checkpoints/, effective_config.ini, VERSION).
Вызывается из main.py перед запуском команды.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from app_logger import log_debug, log_soft
from config import ENV_FILE, SETTINGS_FILE, TOOLKIT_VERSION, ExperimentConfig, config_hash, dump_ini

TRACES_DIR = "traces"
CHECKPOINTS_DIR = "checkpoints"
EFFECTIVE_CONFIG = "effective_config.ini"
VERSION_FILE = "VERSION"


def ensure_settings_ini(path: Path = SETTINGS_FILE) -> bool:
    """Создаёт settings.ini с дефолтными значениями, если файла нет"""
    if path.exists():
        return False
    config = configparser.ConfigParser()
    config["Settings"] = {"default_profile": "desk"}
    with open(path, "w", encoding="utf-8") as f:
        config.write(f)
    log_soft(f"[require] Создан файл конфигурации: {path.name}")
    return True


def ensure_env_file(path: Path = ENV_FILE) -> bool:
    """Создаёт .env с шаблоном, если файла нет"""
    if path.exists():
        return False
    content = (
        'LIPDD_WORKERS=""\n'
        'LIPDD_RUNS_DIR="runs"\n'
        'LIPDD_DATA_DIR="data"\n'
        'LIPDD_LOG_LEVEL="1"\n'
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(content)
    log_soft(f"[require] Создан файл окружения: {path.name}")
    return True


def initialize_app_structure(settings_path: Path = SETTINGS_FILE, env_path: Path = ENV_FILE):
    try:
        ensure_settings_ini(settings_path)
        ensure_env_file(env_path)
    except OSError as e:
        log_soft(f"[require] Ошибка подготовки файлов приложения: {e}")


def run_dir_for(runs_root: Path, cfg: ExperimentConfig) -> Path:
    return Path(runs_root) / f"{cfg.experiment.name}-{config_hash(cfg)}"


def prepare_run_dir(run_dir: Path, cfg: ExperimentConfig) -> Path:
    """Создаёт структуру каталога прогона и записывает эффективный конфиг"""
    run_dir = Path(run_dir)
    for sub in (TRACES_DIR, CHECKPOINTS_DIR):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    (run_dir / EFFECTIVE_CONFIG).write_text(dump_ini(cfg), encoding="utf-8")
    (run_dir / VERSION_FILE).write_text(TOOLKIT_VERSION + "\n", encoding="utf-8")
    log_debug(f"[require] каталог прогона готов: {run_dir}")
    return run_dir
