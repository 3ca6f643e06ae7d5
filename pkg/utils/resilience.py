"""
Resilience and failure recovery utilities for MacCap runs.
Handles concurrent runs on one output directory, training aborts and flaky asset loads.
"""

import copy
import os
from pathlib import Path
from typing import Any, Dict, Optional

from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from utils.logging import get_logger

logger = get_logger("resilience")


# Real-weight assets often live on network mounts
retry_io = retry(
    reraise=True,
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=0.5, min=0.5, max=4),
    retry=retry_if_exception_type(OSError),
)


class RunLock:
    """PID lockfile preventing two commands from writing one run directory."""

    def __init__(self, run_dir: Path, name: str = "maccap.lock"):
        self.lockfile_path = Path(run_dir) / name

    def acquire(self) -> bool:
        """Acquire the lock; returns False when another live process holds it."""
        try:
            self.lockfile_path.parent.mkdir(parents=True, exist_ok=True)
            if self.lockfile_path.exists():
                try:
                    old_pid = int(self.lockfile_path.read_text().strip())
                except ValueError:
                    old_pid = -1

                if old_pid > 0 and old_pid != os.getpid() and self._is_process_running(old_pid):
                    logger.warning(f"Another run is writing {self.lockfile_path.parent} (PID: {old_pid})")
                    return False
                logger.info(f"Removing stale lockfile for PID {old_pid}")
                self.lockfile_path.unlink()

            self.lockfile_path.write_text(str(os.getpid()))
            logger.debug(f"Run lock acquired (PID: {os.getpid()})")
            return True

        except OSError as e:
            logger.error(f"Failed to acquire run lock: {e}")
            return False

    def release(self):
        """Release the lock."""
        try:
            if self.lockfile_path.exists():
                self.lockfile_path.unlink()
                logger.debug("Run lock released")
        except OSError as e:
            logger.warning(f"Failed to release run lock: {e}")

    def __enter__(self):
        if not self.acquire():
            raise OSError(f"Run directory {self.lockfile_path.parent} is locked by another process")
        return self

    def __exit__(self, exc_type, exc, tb):
        self.release()
        return False

    @staticmethod
    def _is_process_running(pid: int) -> bool:
        import psutil
        return psutil.pid_exists(pid)


class CheckpointKeeper:
    """Holds the last adaptor state known to produce a finite loss."""

    def __init__(self):
        self._state: Optional[Dict[str, Any]] = None
        self.step: int = -1

    def remember(self, module, step: int):
        self._state = copy.deepcopy(module.state_dict())
        self.step = step

    def restore(self, module) -> bool:
        if self._state is None:
            return False
        module.load_state_dict(self._state)
        return True

    def dump(self, module, path: Optional[Path], header_extra: Dict[str, Any]) -> Optional[Path]:
        """Restore the last-good state into module and write it beside path."""
        if path is None or not self.restore(module):
            return None

        from checkpoint import save_checkpoint

        target = Path(f"{path}.last_good")
        try:
            save_checkpoint(module, target, **header_extra)
            logger.info(f"Last-good checkpoint (step {self.step}) written to {target}")
            return target
        except OSError as e:
            logger.error(f"Failed to write last-good checkpoint {target}: {e}")
            return None
