import os

import psutil
import pytest

from errors import RunLockedError
from run_lock import LOCK_NAME, RunDirLock, is_alive, read_lock_pid


def dead_pid() -> int:
    pid = 999_999
    while psutil.pid_exists(pid):
        pid += 1
    return pid


def test_acquire_and_release(run_dir):
    lock = RunDirLock(run_dir)
    with lock:
        assert read_lock_pid(run_dir / LOCK_NAME) == os.getpid()
    assert not (run_dir / LOCK_NAME).exists()


def test_second_acquire_in_same_process_fails(run_dir):
    with RunDirLock(run_dir):
        with pytest.raises(RunLockedError):
            RunDirLock(run_dir).acquire()


def test_stale_lock_from_dead_process_is_replaced(run_dir):
    (run_dir / LOCK_NAME).write_text(str(dead_pid()), encoding="utf-8")
    with RunDirLock(run_dir) as lock:
        assert lock.acquired
        assert read_lock_pid(run_dir / LOCK_NAME) == os.getpid()


def test_garbled_lock_is_replaced(run_dir):
    (run_dir / LOCK_NAME).write_text("not a pid", encoding="utf-8")
    with RunDirLock(run_dir):
        assert read_lock_pid(run_dir / LOCK_NAME) == os.getpid()


def test_old_lock_is_removed_by_ttl(run_dir):
    path = run_dir / LOCK_NAME
    path.write_text(str(os.getpid()), encoding="utf-8")
    old = path.stat().st_mtime - 3600
    os.utime(path, (old, old))
    with RunDirLock(run_dir, ttl=60):
        assert path.exists()


def test_release_keeps_foreign_lock(run_dir):
    lock = RunDirLock(run_dir).acquire()
    (run_dir / LOCK_NAME).write_text(str(dead_pid()), encoding="utf-8")
    lock.release()
    assert (run_dir / LOCK_NAME).exists()


def test_is_alive():
    assert is_alive(os.getpid())
    assert not is_alive(dead_pid())
