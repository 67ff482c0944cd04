"""
Центральный конфигурационный модуль проекта.

Три слоя:
  1. окружение (.env + переменные LIPDD_*) → EnvSettings (pydantic-settings)
  2. settings.ini [Settings] — умолчания приложения (default_profile)
  3. конфиг эксперимента (INI): профиль ← файл ← точечные переопределения section.key=value
"""

from __future__ import annotations

import configparser
import hashlib
import json
import typing
from pathlib import Path
from typing import Literal

import dotenv
import psutil
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from app_logger import log_both, log_soft
from errors import ConfigError


# ────────────────────────────────────────────────────────────────
# Базовые пути проекта
# ────────────────────────────────────────────────────────────────

SCRIPT_DIR = Path(__file__).resolve().parent
SETTINGS_FILE = SCRIPT_DIR / "settings.ini"
PROFILES_DIR = SCRIPT_DIR / "profiles"
ENV_FILE = SCRIPT_DIR / ".env"

TOOLKIT_VERSION = "0.1.0"
HASH_LEN = 12


# ────────────────────────────────────────────────────────────────
# Окружение (.env → LIPDD_*)
# ────────────────────────────────────────────────────────────────

dotenv.load_dotenv(ENV_FILE)


def default_workers() -> int:
    """Физические ядра (psutil), минимум 1"""
    return max(1, psutil.cpu_count(logical=False) or psutil.cpu_count() or 1)


class EnvSettings(BaseSettings):
    model_config = SettingsConfigDict(env_prefix="LIPDD_", extra="ignore", env_ignore_empty=True)

    workers: int = Field(default_factory=default_workers, ge=1)
    runs_dir: Path = Path("runs")
    data_dir: Path = Path("data")
    log_level: int = Field(1, ge=0, le=2)


def env_settings() -> EnvSettings:
    try:
        return EnvSettings()
    except ValidationError as e:
        err = e.errors()[0]
        key = "LIPDD_" + str(err["loc"][0]).upper() if err.get("loc") else "LIPDD_*"
        raise ConfigError(key, err["msg"]) from None


# ────────────────────────────────────────────────────────────────
# settings.ini
# ────────────────────────────────────────────────────────────────

def read_app_settings(path: Path = SETTINGS_FILE) -> dict[str, str]:
    parser = configparser.ConfigParser()
    if Path(path).exists():
        parser.read(path, encoding="utf-8")
    if parser.has_section("Settings"):
        return dict(parser["Settings"])
    return {}


def default_profile(path: Path = SETTINGS_FILE) -> str:
    return read_app_settings(path).get("default_profile", "desk")


# ────────────────────────────────────────────────────────────────
# Секции конфигурации эксперимента
# ────────────────────────────────────────────────────────────────

AXES = ("width", "depth", "samples", "noise", "optimizer", "loss")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ExperimentSection(_Section):
    name: str = "lipdd"
    axis: Literal["width", "depth", "samples", "noise", "optimizer", "loss"] = "width"
    seeds: list[int] = [0, 1, 2, 3]
    eval_every: int = Field(10, ge=1)
    optimizers: list[Literal["sgd", "adam"]] = ["sgd", "adam"]
    losses: list[Literal["ce", "mse"]] = ["ce", "mse"]
    save_checkpoints: bool = True


class ModelSection(_Section):
    family: Literal["ff", "cnn"] = "ff"
    widths: list[int] = [16, 32, 64, 80, 96, 128, 256]
    depths: list[int] = [1, 2, 3, 4, 5]
    depth_width: int = Field(64, ge=1)
    base_width: int = Field(256, ge=1)


class DataSection(_Section):
    source: Literal["synthetic", "mnist1d", "cifar10"] = "synthetic"
    path: str | None = None
    n_train: int = Field(4000, ge=1)
    n_test: int = Field(1000, ge=1)
    input_dim: int = Field(40, ge=1)
    num_classes: int = Field(10, ge=2)
    seed: int = 0
    subsample: int | None = None
    subsample_seed: int = 0
    shuffle_fraction: float = Field(0.0, ge=0.0, le=1.0)
    shuffle_seed: int = 0
    corrupt_test: bool = False
    strict_counts: bool = True
    sample_sizes: list[int] = [4000, 1000, 500, 100]
    noise_levels: list[float] = [0.0, 0.1, 0.15, 0.2, 0.25, 0.5, 0.75, 1.0]


class TrainSection(_Section):
    loss: Literal["ce", "mse"] = "ce"
    optimizer: Literal["sgd", "adam"] = "sgd"
    base_lr: float | None = Field(None, ge=0.0)
    schedule: Literal["warmup20000step25", "cont100", "constant"] = "warmup20000step25"
    warmup_updates: int = Field(20_000, ge=1)
    step_epochs: int = Field(2_500, ge=1)
    cont_epochs: int = Field(100, ge=1)
    batch_size: int | None = Field(None, ge=1)
    min_epochs: int = Field(0, ge=0)
    max_epochs: int = Field(100, ge=1)
    grad_norm_threshold: float | None = Field(None, gt=0.0)
    mse_reduction: Literal["mean", "sum"] = "mean"

    def lr_for(self, family: str, loss: str | None = None) -> float:
        """Базовый LR по умолчанию: FF 0.005 (CE) / 0.01 (MSE), CNN 0.01"""
        if self.base_lr is not None:
            return self.base_lr
        if family == "cnn":
            return 0.01
        return 0.005 if (loss or self.loss) == "ce" else 0.01

    def batch_for(self, family: str) -> int:
        if self.batch_size is not None:
            return self.batch_size
        return 128 if family == "cnn" else 512


class BoundsSection(_Section):
    method: Literal["gram", "power"] = "gram"
    max_iters: int = Field(1000, ge=1)
    rel_tol: float = Field(1e-9, gt=0.0)
    power_seed: int = 0
    probe: bool = False
    pairs_per_lambda: int = Field(10_000, ge=0)
    probe_seed: int = 0
    softmax: bool = False
    chunk: int = Field(256, ge=1)


class BiasVarSection(_Section):
    widths: list[int] = [16, 80, 256]
    seeds: list[int] = [0, 1, 2, 3]
    xprime: list[Literal["zero", "test-point"]] = ["zero", "test-point"]
    xprime_seed: int = 0


class ExperimentConfig(_Section):
    experiment: ExperimentSection = Field(default_factory=ExperimentSection)
    model: ModelSection = Field(default_factory=ModelSection)
    data: DataSection = Field(default_factory=DataSection)
    train: TrainSection = Field(default_factory=TrainSection)
    bounds: BoundsSection = Field(default_factory=BoundsSection)
    biasvar: BiasVarSection = Field(default_factory=BiasVarSection)


SECTIONS: dict[str, type[_Section]] = {
    name: typing.get_type_hints(ExperimentConfig)[name] for name in ExperimentConfig.model_fields
}


# ────────────────────────────────────────────────────────────────
# INI ⇄ конфигурация
# ────────────────────────────────────────────────────────────────

RawConfig = dict[str, dict[str, str]]


def _is_list_field(section: str, key: str) -> bool:
    annotation = SECTIONS[section].model_fields[key].annotation
    return typing.get_origin(annotation) is list


def _allows_none(section: str, key: str) -> bool:
    annotation = SECTIONS[section].model_fields[key].annotation
    return type(None) in typing.get_args(annotation)


def _coerce(section: str, key: str, value: str):
    if section not in SECTIONS:
        raise ConfigError(section, f"неизвестная секция (допустимы: {', '.join(SECTIONS)})")
    if key not in SECTIONS[section].model_fields:
        raise ConfigError(f"{section}.{key}", "неизвестный ключ")
    value = value.strip()
    if _is_list_field(section, key):
        return [v.strip() for v in value.split(",") if v.strip()]
    if value.lower() in ("none", "null", "") and _allows_none(section, key):
        return None
    return value


def _merge(base: RawConfig, extra: RawConfig) -> RawConfig:
    merged = {s: dict(v) for s, v in base.items()}
    for section, values in extra.items():
        merged.setdefault(section, {}).update(values)
    return merged


def read_ini(path: Path) -> RawConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(str(path), "файл конфигурации не найден")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(str(path), f"ошибка разбора INI: {e}") from None
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_ini_text(text: str) -> RawConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read_string(text)
    return {s: dict(parser[s]) for s in parser.sections()}


def parse_override(item: str) -> tuple[str, str, str]:
    """'train.base_lr=0.005' → ('train', 'base_lr', '0.005')"""
    if "=" not in item:
        raise ConfigError(item, "переопределение должно иметь вид section.key=value")
    dotted, value = item.split("=", 1)
    parts = dotted.strip().split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(dotted.strip(), "ключ должен иметь вид section.key")
    return parts[0], parts[1], value


def build_config(raw: RawConfig) -> ExperimentConfig:
    data: dict[str, dict] = {}
    for section, values in raw.items():
        if section not in SECTIONS:
            raise ConfigError(section, f"неизвестная секция (допустимы: {', '.join(SECTIONS)})")
        data[section] = {k: _coerce(section, k, v) for k, v in values.items()}
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        err = e.errors()[0]
        key = ".".join(str(p) for p in err["loc"][:2])
        raise ConfigError(key, err["msg"]) from None


def profile_path(profile: str) -> Path:
    return PROFILES_DIR / f"{profile}.ini"


def load_config(path: Path | None = None, profile: str | None = None,
                overrides: list[str] | None = None) -> ExperimentConfig:
    """Профиль ← файл ← переопределения; ошибки — ConfigError с ключом"""
    raw: RawConfig = {}
    if profile:
        p = profile_path(profile)
        if not p.exists():
            raise ConfigError("profile", f"неизвестный профиль {profile!r} ({p} не найден)")
        raw = _merge(raw, read_ini(p))
    if path is not None:
        raw = _merge(raw, read_ini(Path(path)))
    for item in overrides or []:
        section, key, value = parse_override(item)
        raw = _merge(raw, {section: {key: value}})
    cfg = build_config(raw)
    log_soft(f"[CONFIG] загружено: profile={profile}, file={path}, overrides={len(overrides or [])}")
    return cfg


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    return str(value)


def dump_ini(cfg: ExperimentConfig) -> str:
    """Эффективный конфиг в INI; build_config(parse_ini_text(dump_ini(c))) == c"""
    lines: list[str] = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        for key, value in getattr(cfg, section).model_dump().items():
            lines.append(f"{key} = {_format(value)}")
        lines.append("")
    return "\n".join(lines)


def load_ini_text(text: str) -> ExperimentConfig:
    return build_config(parse_ini_text(text))


def config_hash(cfg: ExperimentConfig) -> str:
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LEN]


# ────────────────────────────────────────────────────────────────
# Сводка при старте
# ────────────────────────────────────────────────────────────────

def log_config_summary(cfg: ExperimentConfig, run_hash: str, workers: int):
    log_both("═" * 70)
    log_both(f"Конфигурация эксперимента {cfg.experiment.name!r} ({run_hash})")
    log_both(f"AXIS          : {cfg.experiment.axis}")
    log_both(f"MODEL         : {cfg.model.family}, widths={cfg.model.widths}")
    log_both(f"DATA          : {cfg.data.source} (n_train={cfg.data.n_train}, n_test={cfg.data.n_test})")
    log_both(f"TRAIN         : {cfg.train.loss}/{cfg.train.optimizer}, schedule={cfg.train.schedule}, "
             f"epochs {cfg.train.min_epochs}..{cfg.train.max_epochs}")
    log_both(f"SEEDS         : {cfg.experiment.seeds}")
    log_both(f"WORKERS       : {workers}")
    log_both("═" * 70)


__all__ = [
    "SCRIPT_DIR",
    "SETTINGS_FILE",
    "PROFILES_DIR",
    "ENV_FILE",
    "TOOLKIT_VERSION",
    "AXES",
    "EnvSettings",
    "env_settings",
    "default_profile",
    "read_app_settings",
    "ExperimentConfig",
    "ExperimentSection",
    "ModelSection",
    "DataSection",
    "TrainSection",
    "BoundsSection",
    "BiasVarSection",
    "load_config",
    "build_config",
    "read_ini",
    "parse_override",
    "dump_ini",
    "load_ini_text",
    "config_hash",
    "log_config_summary",
]
