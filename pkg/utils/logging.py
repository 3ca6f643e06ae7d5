import logging
import sys
from datetime import datetime
from pathlib import Path
from typing import Optional

LOG_FORMAT = '%(asctime)s | %(levelname)s | %(name)s:%(lineno)d | %(message)s'


class ColoredFormatter(logging.Formatter):
    """Level-colored console output; plain when the stream is not a terminal."""

    COLORS = {
        'DEBUG': '\033[36m',
        'INFO': '\033[32m',
        'WARNING': '\033[33m',
        'ERROR': '\033[31m',
        'CRITICAL': '\033[35m',
    }
    RESET = '\033[0m'

    def __init__(self, fmt: str = LOG_FORMAT, datefmt: str = '%H:%M:%S', use_color: bool = True):
        super().__init__(fmt=fmt, datefmt=datefmt)
        self.use_color = use_color

    def format(self, record):
        if not self.use_color or getattr(record, 'no_color', False):
            return super().format(record)

        # Copy so file handlers sharing the record keep the plain level name
        record = logging.makeLogRecord(record.__dict__)
        color = self.COLORS.get(record.levelname, self.RESET)
        record.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(record)


def setup_logging(
    log_level: str = "INFO",
    log_dir: Optional[Path] = None,
    command: Optional[str] = None,
) -> logging.Logger:
    """
    Sets up logging for MacCap commands.

    Args:
        log_level: Logging level (DEBUG, INFO, WARNING, ERROR, CRITICAL)
        log_dir: Directory for the run log files; console only when None
        command: CLI command name, used in the log file name

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger("maccap")
    logger.setLevel(getattr(logging, log_level.upper(), logging.INFO))
    logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(ColoredFormatter(use_color=sys.stderr.isatty()))
    logger.addHandler(console_handler)

    if log_dir is not None:
        log_dir = Path(log_dir)
        log_dir.mkdir(parents=True, exist_ok=True)
        stamp = datetime.now().strftime('%Y%m%d')
        file_formatter = logging.Formatter(fmt=LOG_FORMAT, datefmt='%Y-%m-%d %H:%M:%S')

        file_handler = logging.FileHandler(log_dir / f"maccap_{command or 'run'}_{stamp}.log", encoding='utf-8')
        file_handler.setFormatter(file_formatter)
        logger.addHandler(file_handler)

        error_handler = logging.FileHandler(log_dir / f"errors_{stamp}.log", encoding='utf-8')
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(file_formatter)
        logger.addHandler(error_handler)

    return logger


def get_logger(name: str) -> logging.Logger:
    return logging.getLogger(f"maccap.{name}")


def log_command_failure(logger: logging.Logger, command: str, error: BaseException, with_traceback: bool = False):
    """One error line naming the command and exception type; the traceback only on request."""
    logger.error(
        f"{command} failed ({type(error).__name__}): {error}",
        exc_info=error if with_traceback else None,
        extra={"command": command, "error_type": type(error).__name__},
    )


def log_performance(logger: logging.Logger, operation: str, duration: float, extra_info: Optional[dict] = None):
    info = {"operation": operation, "duration_ms": round(duration * 1000, 2)}
    if extra_info:
        info.update(extra_info)
    logger.info(f"Performance: {operation} completed in {duration:.3f}s", extra=info)


def log_epoch_result(logger: logging.Logger, epoch: int, mean_loss: float, n_samples: int):
    logger.info(
        f"Epoch {epoch} completed: mean loss {mean_loss:.4f} over {n_samples} captions",
        extra={"epoch": epoch, "mean_loss": mean_loss, "n_samples": n_samples},
    )


def log_caption_result(logger: logging.Logger, image_id: str, caption: str, similarity: float):
    logger.debug(
        f"Captioned {image_id}: '{caption}' (similarity {similarity:.3f})",
        extra={"image_id": image_id, "caption": caption, "similarity": similarity},
    )
