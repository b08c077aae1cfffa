"""
Logging utilities for the event-grounding toolkit.

Every module logs through get_logger(__name__): coloured console output plus a
rotating per-module file under Config.LOG_DIR (VTG_LOG_TO_FILE=0 turns the
file off).
"""

import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, Optional, Set, Union

import colorlog
from concurrent_log_handler import ConcurrentRotatingFileHandler

from src.config.config import Config

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
DATE_FORMAT = "%Y-%m-%d %H:%M:%S"
LOG_COLORS = {
    'DEBUG': 'cyan',
    'INFO': 'green',
    'WARNING': 'yellow',
    'ERROR': 'red',
    'CRITICAL': 'red,bg_white',
}
MAX_LOG_BYTES = 10 * 1024 * 1024
LOG_BACKUPS = 5

_configured: Set[str] = set()


def _resolve_level(level: Union[int, str, None]) -> int:
    if level is None:
        level = Config.LOG_LEVEL
    if isinstance(level, int):
        return level
    resolved = logging.getLevelName(str(level).upper())
    return resolved if isinstance(resolved, int) else logging.INFO


def _console_handler(level: int) -> logging.Handler:
    handler = logging.StreamHandler()
    handler.setLevel(level)
    handler.setFormatter(colorlog.ColoredFormatter("%(log_color)s" + LOG_FORMAT, datefmt=DATE_FORMAT,
                                                   log_colors=LOG_COLORS))
    return handler


def _file_handler(name: str, level: int) -> logging.Handler:
    logs_dir = Path(Config.LOG_DIR)
    logs_dir.mkdir(parents=True, exist_ok=True)
    handler = ConcurrentRotatingFileHandler(
        filename=logs_dir / f"{name.split('.')[-1]}.log",
        mode='a',
        maxBytes=MAX_LOG_BYTES,
        backupCount=LOG_BACKUPS,
        encoding='utf-8'
    )
    handler.setLevel(level)
    # no colour codes in files
    handler.setFormatter(logging.Formatter(LOG_FORMAT, datefmt=DATE_FORMAT))
    return handler


def get_logger(name: str, log_level: Union[int, str, None] = None) -> logging.Logger:
    """
    Get a configured logger instance.

    Args:
        name: Logger name, typically __name__
        log_level: Level name or number (default: Config.LOG_LEVEL)

    Returns:
        Configured logger
    """
    logger = logging.getLogger(name)
    if logger.handlers:
        return logger

    level = _resolve_level(log_level)
    logger.setLevel(level)
    logger.propagate = False
    logger.addHandler(_console_handler(level))
    if Config.LOG_TO_FILE:
        logger.addHandler(_file_handler(name, level))

    _configured.add(name)
    return logger


def set_level(level: Union[int, str]) -> int:
    """Apply one level to every logger created by get_logger and to their handlers."""
    resolved = _resolve_level(level)
    for name in _configured:
        logger = logging.getLogger(name)
        logger.setLevel(resolved)
        for handler in logger.handlers:
            handler.setLevel(resolved)
    return resolved


class ProgressLogger:
    """
    Times the stages of a staged run (data, training, decoding, scoring).
    """

    def __init__(self, total_stages: int):
        self.logger = get_logger("progress")
        self.total_stages = total_stages
        self.current_stage = 0
        self.stage_times: Dict[str, float] = {}
        self.start_times: Dict[str, float] = {}
        self.failed: Optional[str] = None

    def _percent(self, done: int) -> float:
        return done / self.total_stages * 100 if self.total_stages else 100.0

    def start_stage(self, stage_name: str) -> None:
        self.current_stage += 1
        self.start_times[stage_name] = time.perf_counter()
        self.logger.info(f"[{self._percent(self.current_stage - 1):.1f}%] Starting stage: {stage_name} "
                         f"({self.current_stage}/{self.total_stages})")

    def end_stage(self, stage_name: str, success: bool = True) -> None:
        if stage_name not in self.start_times:
            self.logger.warning(f"Ending untracked stage: {stage_name}")
            return

        elapsed = time.perf_counter() - self.start_times[stage_name]
        self.stage_times[stage_name] = elapsed
        if not success:
            self.failed = stage_name
        status = "Completed" if success else "Failed"
        self.logger.info(f"[{self._percent(self.current_stage):.1f}%] {status} stage: {stage_name} in {elapsed:.2f}s")

    @contextmanager
    def stage(self, stage_name: str) -> Iterator[None]:
        """Time the enclosed block as one stage; an exception marks it failed and propagates."""
        self.start_stage(stage_name)
        try:
            yield
        except BaseException:
            self.end_stage(stage_name, success=False)
            raise
        self.end_stage(stage_name)

    def summary(self) -> Dict[str, object]:
        """Total time, per-stage seconds and per-stage share of the total (percent)."""
        total_time = sum(self.stage_times.values())
        return {
            "total_time": total_time,
            "stage_times": dict(self.stage_times),
            "stage_percentages": {
                stage: (elapsed / total_time * 100) if total_time > 0 else 0.0
                for stage, elapsed in self.stage_times.items()
            },
            "failed_stage": self.failed,
        }
