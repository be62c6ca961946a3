"""
app/core/logging.py
bst 네임스페이스 로거 설정, 학습 진행 로깅
"""

import logging
import logging.handlers
import sys
import time
from pathlib import Path
from typing import Optional, TextIO

from app.core.config import DEFAULT_LOG_FORMAT

ROOT_LOGGER_NAME = "bst"

# 파일 로그는 호출 위치까지 남김
FILE_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(funcName)s:%(lineno)d - %(message)s"
FILE_LOG_MAX_BYTES = 5 * 1024 * 1024
FILE_LOG_BACKUPS = 3

# 학습 중 디버그 출력이 많은 서드파티 로거
QUIET_LOGGERS = ("numpy", "torch", "urllib3")


class ColoredFormatter(logging.Formatter):
    """레벨 이름을 ANSI 색으로 감싸는 콘솔 포매터"""

    RESET = "\033[0m"
    LEVEL_COLORS = {
        logging.DEBUG: "\033[36m",
        logging.INFO: "\033[32m",
        logging.WARNING: "\033[33m",
        logging.ERROR: "\033[31m",
        logging.CRITICAL: "\033[1;35m",
    }

    def format(self, record: logging.LogRecord) -> str:
        color = self.LEVEL_COLORS.get(record.levelno)
        if color is None:
            return super().format(record)
        # 파일 핸들러와 레코드를 공유하므로 사본만 수정
        tinted = logging.makeLogRecord(record.__dict__)
        tinted.levelname = f"{color}{record.levelname}{self.RESET}"
        return super().format(tinted)


def _console_handler(level: int, fmt: str, stream: TextIO) -> logging.Handler:
    handler = logging.StreamHandler(stream)
    handler.setLevel(level)
    formatter_cls = ColoredFormatter if stream.isatty() else logging.Formatter
    handler.setFormatter(formatter_cls(fmt))
    return handler


def _file_handler(log_file: str) -> logging.Handler:
    path = Path(log_file)
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.handlers.RotatingFileHandler(
        path, maxBytes=FILE_LOG_MAX_BYTES, backupCount=FILE_LOG_BACKUPS, encoding="utf-8"
    )
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter(FILE_LOG_FORMAT))
    return handler


def setup_logging(
    level: str = "INFO",
    log_file: Optional[str] = None,
    fmt: str = DEFAULT_LOG_FORMAT,
) -> logging.Logger:
    """bst 로거에 콘솔(stderr)과 선택적 회전 파일 핸들러 연결

    예측 결과를 stdout 으로 내보낼 수 있도록 콘솔 로그는 stderr 로 보낸다.
    반복 호출하면 이전 핸들러를 닫고 교체한다.
    """
    numeric_level = logging.getLevelName(level.upper())
    if not isinstance(numeric_level, int):
        numeric_level = logging.INFO

    app_logger = logging.getLogger(ROOT_LOGGER_NAME)
    for handler in list(app_logger.handlers):
        app_logger.removeHandler(handler)
        handler.close()

    app_logger.setLevel(logging.DEBUG if log_file else numeric_level)
    app_logger.addHandler(_console_handler(numeric_level, fmt, sys.stderr))
    if log_file:
        app_logger.addHandler(_file_handler(log_file))

    for name in QUIET_LOGGERS:
        logging.getLogger(name).setLevel(logging.WARNING)

    app_logger.debug(f"로깅 초기화: level={level.upper()}, file={log_file or '-'}")
    return app_logger


def get_logger(name: str) -> logging.Logger:
    """bst 네임스페이스 하위 로거"""
    if name == ROOT_LOGGER_NAME or name.startswith(f"{ROOT_LOGGER_NAME}."):
        return logging.getLogger(name)
    return logging.getLogger(f"{ROOT_LOGGER_NAME}.{name}")


class TrainingLogger:
    """스텝 구간 평균 손실과 처리량을 주기적으로 기록"""

    def __init__(self, model_tag: str, log_every: int = 50):
        self.logger = get_logger("training")
        self.model_tag = model_tag
        self.log_every = max(1, log_every)
        self.started = time.perf_counter()
        self._loss_sum = 0.0
        self._loss_count = 0

    def _elapsed(self) -> float:
        return time.perf_counter() - self.started

    def log_step(self, step: int, loss: float, examples_seen: int) -> None:
        self._loss_sum += loss
        self._loss_count += 1
        if step % self.log_every:
            return
        window_mean = self._loss_sum / self._loss_count
        self._loss_sum, self._loss_count = 0.0, 0
        throughput = examples_seen / max(self._elapsed(), 1e-9)
        self.logger.info(f"[{self.model_tag}] step {step}: loss {window_mean:.5f}, {throughput:.0f} examples/s")

    def log_epoch(self, epoch: int, mean_loss: float, steps: int) -> None:
        self.logger.info(f"[{self.model_tag}] epoch {epoch} 완료: 평균 loss {mean_loss:.5f} ({steps} 스텝)")

    def log_finished(self, total_steps: int) -> None:
        self.logger.info(f"[{self.model_tag}] 학습 완료: {total_steps} 스텝, {self._elapsed():.1f}초")


def log_error_with_context(error: Exception, context: Optional[dict] = None) -> None:
    """명령 실패를 컨텍스트와 함께 기록, DEBUG 레벨이면 트레이스백 포함"""
    logger = get_logger("errors")
    suffix = f" | {context}" if context else ""
    logger.error(f"{type(error).__name__}: {error}{suffix}", exc_info=logger.isEnabledFor(logging.DEBUG))
