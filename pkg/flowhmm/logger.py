"""
Standardized logging configuration for flowhmm.
"""

import json
import logging
import logging.handlers
import sys
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from flowhmm.config import Config

# Extra record attributes copied into structured log lines
STRUCTURED_FIELDS = (
    "class_label",
    "outer_iter",
    "inner_iter",
    "nll",
    "learning_rate",
    "state",
    "component",
    "frame",
    "error_type",
)


class CustomFormatter(logging.Formatter):
    """Custom formatter with colored output for console."""

    COLORS = {
        "DEBUG": "\033[36m",  # Cyan
        "INFO": "\033[32m",  # Green
        "WARNING": "\033[33m",  # Yellow
        "ERROR": "\033[31m",  # Red
        "CRITICAL": "\033[35m",  # Magenta
        "RESET": "\033[0m",
    }

    def __init__(self, use_color: bool = True) -> None:
        self.use_color = use_color
        super().__init__()

    def format(self, record: logging.LogRecord) -> str:
        """Format log record with optional colors."""
        if self.use_color and record.levelname in self.COLORS:
            color = self.COLORS[record.levelname]
            reset = self.COLORS["RESET"]
            level_name = f"{color}{record.levelname:<8}{reset}"
        else:
            level_name = f"{record.levelname:<8}"

        timestamp = self.formatTime(record, "%Y-%m-%d %H:%M:%S")
        message = record.getMessage()

        if record.exc_info:
            if not message.endswith("\n"):
                message += "\n"
            message += self.formatException(record.exc_info)

        return f"{timestamp} | {level_name} | {record.name:<20} | {message}"


class StructuredFormatter(logging.Formatter):
    """JSON formatter for structured logging."""

    def format(self, record: logging.LogRecord) -> str:
        """Format log record as JSON."""
        log_data: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }

        for field in STRUCTURED_FIELDS:
            if hasattr(record, field):
                log_data[field] = getattr(record, field)

        if record.exc_info:
            log_data["exception"] = self.formatException(record.exc_info)

        return json.dumps(log_data, ensure_ascii=False, default=str)


def setup_logging(config: Config) -> None:
    """
    Setup logging configuration.

    Console output goes to stderr so that subcommands writing results to stdout stay
    byte-identical across runs.

    Args:
        config: Configuration object
    """
    root_logger = logging.getLogger()
    root_logger.setLevel(getattr(logging, config.log_level))
    root_logger.handlers.clear()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setLevel(getattr(logging, config.log_level))
    use_color = hasattr(sys.stderr, "isatty") and sys.stderr.isatty()
    console_handler.setFormatter(CustomFormatter(use_color=use_color))
    root_logger.addHandler(console_handler)

    if config.log_file:
        log_path = Path(config.log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.handlers.RotatingFileHandler(
            config.log_file, maxBytes=10 * 1024 * 1024, backupCount=5, encoding="utf-8"  # 10MB
        )
        file_handler.setLevel(getattr(logging, config.log_level))
        file_handler.setFormatter(StructuredFormatter())
        root_logger.addHandler(file_handler)

    app_logger = logging.getLogger("flowhmm")
    app_logger.debug(f"Logging initialized - Level: {config.log_level}")
    if config.log_file:
        app_logger.debug(f"Log file: {config.log_file}")


def get_logger(name: str) -> logging.Logger:
    """
    Get a logger instance.

    Args:
        name: Logger name

    Returns:
        Logger instance
    """
    return logging.getLogger(f"flowhmm.{name}")


def log_run_header(logger: logging.Logger, header: Dict[str, Any]) -> None:
    """Log the reproducibility header of a CLI run."""
    logger.info(f"Run header: {json.dumps(header, sort_keys=True, default=str)}")


def log_outer_iteration(
    logger: logging.Logger,
    class_label: str,
    outer_iter: int,
    nll: float,
    inner_iters: int,
    learning_rate: float,
) -> None:
    """Log the end of one outer EM iteration."""
    logger.info(
        f"[{class_label}] outer {outer_iter}: NLL={nll:.6f} inner={inner_iters} "
        f"lr={learning_rate:.3g}",
        extra={
            "class_label": class_label,
            "outer_iter": outer_iter,
            "nll": nll,
            "learning_rate": learning_rate,
        },
    )


def log_inner_iteration(
    logger: logging.Logger, class_label: str, inner_iter: int, cost: float
) -> None:
    """Log one inner gradient epoch."""
    logger.debug(
        f"[{class_label}] inner {inner_iter}: cost={cost:.6f}",
        extra={"class_label": class_label, "inner_iter": inner_iter, "nll": cost},
    )


def log_convergence(logger: logging.Logger, class_label: str, where: str, iteration: int) -> None:
    """Log that the convergence criterion held for the required streak."""
    logger.info(
        f"[{class_label}] {where} loop converged after {iteration} iterations",
        extra={"class_label": class_label},
    )


def log_degenerate_update(
    logger: logging.Logger, what: str, indices: Sequence[Any], action: str = "kept previous"
) -> None:
    """Report rows/components whose update had no posterior mass."""
    if not indices:
        return
    logger.warning(
        f"Zero posterior mass for {what} {list(indices)}; {action} values",
        extra={"error_type": "zero_mass"},
    )


def log_numerical_issue(
    logger: logging.Logger,
    message: str,
    state: Optional[int] = None,
    component: Optional[int] = None,
    frame: Optional[int] = None,
) -> None:
    """Log a numerical diagnostic with its location."""
    extra: Dict[str, Any] = {"error_type": "numerical"}
    if state is not None:
        extra["state"] = state
    if component is not None:
        extra["component"] = component
    if frame is not None:
        extra["frame"] = frame
    logger.error(message, extra=extra)
