"""
Защита каталога прогона от одновременной записи двумя процессами.

✔ lock-файл с PID внутри каталога прогона
✔ проверка PID через psutil
✔ TTL очистка зависших lock
✔ авто release при выходе
"""

from __future__ import annotations

import atexit
import os
import time
from pathlib import Path

import psutil

from app_logger import log_debug, log_soft
from errors import RunLockedError

LOCK_NAME = ".lock"
LOCK_TTL_SECONDS = 24 * 3600


def is_alive(pid: int) -> bool:
    try:
        return psutil.pid_exists(pid) and psutil.Process(pid).is_running()
    except psutil.Error:
        return False


def is_lock_too_old(lock_path: Path, ttl: float = LOCK_TTL_SECONDS) -> bool:
    try:
        return time.time() - lock_path.stat().st_mtime > ttl
    except OSError:
        return False


def read_lock_pid(lock_path: Path) -> int | None:
    try:
        return int(lock_path.read_text(encoding="utf-8").strip())
    except (OSError, ValueError):
        return None


class RunDirLock:
    """Эксклюзивный захват каталога прогона; повторный захват живым процессом → RunLockedError"""

    def __init__(self, run_dir: Path, ttl: float = LOCK_TTL_SECONDS):
        self.run_dir = Path(run_dir)
        self.lock_path = self.run_dir / LOCK_NAME
        self.ttl = ttl
        self.acquired = False
        atexit.register(self.release)

    def acquire(self) -> "RunDirLock":
        if self.acquired:
            return self
        self.run_dir.mkdir(parents=True, exist_ok=True)

        if self.lock_path.exists() and is_lock_too_old(self.lock_path, self.ttl):
            log_soft(f"[LOCK] lock старше TTL → удаляем: {self.lock_path}")
            self.lock_path.unlink(missing_ok=True)

        for _ in range(2):
            try:
                with self.lock_path.open("x", encoding="utf-8") as f:
                    f.write(str(os.getpid()))
                self.acquired = True
                log_debug(f"[LOCK] захвачен {self.lock_path}")
                return self
            except FileExistsError:
                pid = read_lock_pid(self.lock_path)
                if pid is not None and pid != os.getpid() and is_alive(pid):
                    raise RunLockedError(f"каталог {self.run_dir} занят процессом PID {pid}") from None
                if pid == os.getpid():
                    raise RunLockedError(f"каталог {self.run_dir} уже захвачен этим процессом") from None
                log_soft(f"[LOCK] битый lock или процесс мёртв (PID {pid}) → удаляем")
                self.lock_path.unlink(missing_ok=True)

        raise RunLockedError(f"не удалось захватить {self.lock_path}")

    def release(self):
        if not self.acquired:
            return
        try:
            if read_lock_pid(self.lock_path) == os.getpid():
                self.lock_path.unlink(missing_ok=True)
        except OSError as e:
            log_soft(f"[LOCK] ошибка освобождения {self.lock_path}: {e}")
        self.acquired = False
        log_debug(f"[LOCK] освобождён {self.lock_path}")

    def __enter__(self) -> "RunDirLock":
        return self.acquire()

    def __exit__(self, exc_type, exc, tb):
        self.release()
