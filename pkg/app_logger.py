"""
app_logger.py — логгер с выводом в консоль (stderr) + файлы в папке запуска.

stdout зарезервирован под машинно-читаемый вывод (bounds → JSON),
поэтому консольный handler всегда пишет в sys.stderr.
Потоки-воркеры свипа пишут через очередь (QueueHandler → QueueListener).
"""

import sys
import queue
import logging
import logging.handlers
from pathlib import Path

FORMAT = '[%(asctime)s] %(message)s'
DATEFMT = '%Y-%m-%d %H:%M:%S'

MAIN_FILE = "lipdd.log"
SOFT_FILE = "lipdd_detail.log"
DEBUG_FILE = "lipdd_debug.log"

VERBOSITY_LEVELS = {0: logging.WARNING, 1: logging.INFO, 2: logging.DEBUG}


class AppLogger:
    def __init__(self, log_dir: Path | None = None, verbosity: int = 1):
        self.log_dir = Path(log_dir) if log_dir is not None else None
        formatter = logging.Formatter(FORMAT, datefmt=DATEFMT)

        # 1. Консоль: всегда, в stderr
        console_handler = logging.StreamHandler(sys.stderr)
        console_handler.setFormatter(formatter)
        console_handler.setLevel(VERBOSITY_LEVELS.get(verbosity, logging.DEBUG))

        main_handlers: list[logging.Handler] = [console_handler]
        soft_handlers: list[logging.Handler] = []
        debug_handlers: list[logging.Handler] = []

        # 2. Файлы: только если есть папка запуска
        if self.log_dir is not None:
            self.log_dir.mkdir(parents=True, exist_ok=True)
            for name, bucket in ((MAIN_FILE, main_handlers),
                                 (SOFT_FILE, soft_handlers),
                                 (DEBUG_FILE, debug_handlers)):
                handler = logging.FileHandler(self.log_dir / name, encoding='utf-8')
                handler.setFormatter(formatter)
                bucket.append(handler)

        self.logger = self._make_logger('lipdd', logging.INFO, main_handlers)
        self.soft_logger = self._make_logger('lipdd.soft', logging.INFO, soft_handlers)
        self.debug_logger = self._make_logger('lipdd.debug', logging.DEBUG, debug_handlers)

        self._listeners = []
        for lg, handlers in ((self.logger, main_handlers),
                             (self.soft_logger, soft_handlers),
                             (self.debug_logger, debug_handlers)):
            if not handlers:
                continue
            listener = logging.handlers.QueueListener(
                queue.Queue(maxsize=5000), *handlers, respect_handler_level=True
            )
            lg.handlers.clear()
            lg.addHandler(logging.handlers.QueueHandler(listener.queue))
            listener.start()
            self._listeners.append(listener)

    @staticmethod
    def _make_logger(name: str, level: int, handlers: list) -> logging.Logger:
        lg = logging.getLogger(name)
        lg.setLevel(level)
        lg.propagate = False
        lg.handlers.clear()
        if not handlers:
            lg.addHandler(logging.NullHandler())
        return lg

    def log(self, msg: str, log_type: str = "main"):
        if not msg or not msg.strip():
            return
        if log_type not in ("main", "soft", "debug", "both"):
            log_type = "main"

        if log_type in ("main", "both"):
            self.logger.info(msg)
        if log_type in ("soft", "both"):
            self.soft_logger.info(msg)
        if log_type == "debug":
            self.debug_logger.debug(msg)

    def stop(self):
        for listener in self._listeners:
            try:
                listener.stop()
            except Exception as e:
                print(f"[LOGGER] Ошибка остановки listener: {e}", file=sys.__stderr__)
        self._listeners.clear()
        for lg in (self.logger, self.soft_logger, self.debug_logger):
            lg.handlers.clear()


# ────────────────────────────────────────────────
# Синглтон + защита от вызова до инициализации
# ────────────────────────────────────────────────

_logger_instance: AppLogger | None = None


def init_logger(log_dir: Path | None = None, verbosity: int = 1) -> AppLogger:
    """Вызвать один раз в точке входа (main.py). Повторный вызов с новой папкой пересоздаёт логгер"""
    global _logger_instance
    if _logger_instance is not None:
        if log_dir is None or _logger_instance.log_dir == Path(log_dir):
            return _logger_instance
        _logger_instance.stop()
    _logger_instance = AppLogger(log_dir, verbosity)
    return _logger_instance


def shutdown_logger():
    global _logger_instance
    if _logger_instance is not None:
        _logger_instance.stop()
        _logger_instance = None


class _FallbackLogger:
    def log(self, msg, log_type="main"):
        if log_type in ("main", "both"):
            print(f"[{log_type.upper()}] {msg}", file=sys.stderr)

    def stop(self):
        pass


def get_logger():
    """Экземпляр логгера; до init_logger — упрощённый вывод в stderr"""
    if _logger_instance is None:
        return _FallbackLogger()
    return _logger_instance


def log_main(msg: str):
    get_logger().log(msg, "main")


def log_soft(msg: str):
    get_logger().log(msg, "soft")


def log_debug(msg: str):
    get_logger().log(msg, "debug")


def log_both(msg: str):
    get_logger().log(msg, "both")
