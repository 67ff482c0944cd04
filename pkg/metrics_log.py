"""
metrics_log.py — append-only запись JSONL / CSV с одним замком на файл.

Числа с плавающей точкой пишутся через repr(), поэтому чтение обратно
(read_jsonl / read_csv) восстанавливает значения бит-в-бит.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from threading import Lock

from app_logger import log_debug

_locks: dict[Path, Lock] = {}
_locks_guard = Lock()


def _lock_for(path: Path) -> Lock:
    key = Path(path).resolve()
    with _locks_guard:
        if key not in _locks:
            _locks[key] = Lock()
        return _locks[key]


def format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(text: str):
    """Обратное к format_value: '' → None, целые → int, числа → float, иначе строка"""
    if text == "":
        return None
    if text in ("true", "false"):
        return text == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def _json_safe(value):
    if isinstance(value, float) and not math.isfinite(value):
        return repr(value)
    return value


class MetricsLog:
    """Один выходной файл. Запись из нескольких потоков сериализуется замком файла"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.lock = _lock_for(self.path)
        self.path.parent.mkdir(parents=True, exist_ok=True)

    def append_jsonl(self, row: dict):
        line = json.dumps({k: _json_safe(v) for k, v in row.items()}, ensure_ascii=False)
        with self.lock:
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")

    def write_csv(self, rows: list[dict], columns: list[str] | None = None):
        columns = list(columns or (rows[0].keys() if rows else []))
        with self.lock:
            with open(self.path, "w", encoding="utf-8", newline="") as f:
                writer = csv.writer(f)
                writer.writerow(columns)
                for row in rows:
                    writer.writerow([format_value(row.get(c)) for c in columns])
        log_debug(f"[METRICS] {self.path.name}: {len(rows)} строк")


def write_csv(path: Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    MetricsLog(path).write_csv(rows, columns)
    return Path(path)


def read_csv(path: Path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.DictReader(f)
        return [{k: parse_value(v) for k, v in row.items()} for row in reader]


def read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows
