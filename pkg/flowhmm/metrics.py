"""
Prometheus metrics for flowhmm training runs.
"""

from pathlib import Path
from typing import Optional, Union

from prometheus_client import (
    CollectorRegistry,
    Counter,
    Gauge,
    Histogram,
    Info,
    generate_latest,
    write_to_textfile,
)

from flowhmm.logger import get_logger


class TrainingMetrics:
    """Per-run registry of training gauges, labeled by class."""

    def __init__(self) -> None:
        self.logger = get_logger("metrics")
        self.registry = CollectorRegistry()

        self.flowhmm_train_nll = Gauge(
            "flowhmm_train_nll",
            "Total negative log-likelihood after the latest outer iteration",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_train_learning_rate = Gauge(
            "flowhmm_train_learning_rate",
            "Learning rate in effect",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_train_inner_iterations = Gauge(
            "flowhmm_train_inner_iterations",
            "Inner gradient epochs run in the latest outer iteration",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_train_outer_iterations_total = Counter(
            "flowhmm_train_outer_iterations_total",
            "Completed outer iterations",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_glow_min_abs_det = Gauge(
            "flowhmm_glow_min_abs_det",
            "Smallest |det W| over the invertible convolutions of a Glow model",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_outer_iteration_duration_seconds = Histogram(
            "flowhmm_outer_iteration_duration_seconds",
            "Wall time of one outer iteration",
            ["class_label"],
            registry=self.registry,
        )

        self.flowhmm_info = Info("flowhmm", "Run information", registry=self.registry)

        self.logger.debug("Training metrics initialized")

    def set_run_info(self, version: str, model_kind: str) -> None:
        self.flowhmm_info.info({"version": version, "model_kind": model_kind})

    def record_outer_iteration(
        self,
        class_label: str,
        nll: float,
        learning_rate: float,
        inner_iters: int,
        duration: float,
    ) -> None:
        """Update gauges after one outer iteration."""
        self.flowhmm_train_nll.labels(class_label=class_label).set(nll)
        self.flowhmm_train_learning_rate.labels(class_label=class_label).set(learning_rate)
        self.flowhmm_train_inner_iterations.labels(class_label=class_label).set(inner_iters)
        self.flowhmm_train_outer_iterations_total.labels(class_label=class_label).inc()
        self.flowhmm_outer_iteration_duration_seconds.labels(class_label=class_label).observe(
            duration
        )

    def record_min_abs_det(self, class_label: str, value: Optional[float]) -> None:
        if value is not None:
            self.flowhmm_glow_min_abs_det.labels(class_label=class_label).set(value)

    def get_metrics(self) -> bytes:
        """Metrics in Prometheus exposition format."""
        return generate_latest(self.registry)

    def write_textfile(self, path: Union[str, Path]) -> None:
        """Export the registry for the node-exporter textfile collector."""
        write_to_textfile(str(path), self.registry)
        self.logger.info(f"Wrote training metrics to {path}")
