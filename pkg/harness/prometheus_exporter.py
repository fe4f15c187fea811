"""
Prometheus Metrics Exporter
Writes training gauges to a Prometheus textfile after every epoch
"""

from prometheus_client import CollectorRegistry, Gauge, write_to_textfile
from typing import Dict
import logging

logger = logging.getLogger(__name__)

LOSS_FIELDS = ('l_ctc', 'l_s2s', 'l_jca', 'l_mse', 'l_mtl', 'ter')


class PrometheusExporter:
    """Training gauges kept in a private registry (no HTTP server)"""

    def __init__(self, path: str, stage: str):
        self.path = path
        self.stage = stage
        self.registry = CollectorRegistry()

        self.loss = Gauge(
            'accent_lab_loss',
            'Loss component or TER of the latest epoch',
            ['stage', 'split', 'component'],
            registry=self.registry,
        )
        self.learning_rate = Gauge(
            'accent_lab_learning_rate',
            'Learning rate at the last update',
            ['stage'],
            registry=self.registry,
        )
        self.epoch = Gauge(
            'accent_lab_epoch',
            'Last completed epoch',
            ['stage'],
            registry=self.registry,
        )
        self.step = Gauge(
            'accent_lab_step',
            'Optimizer updates so far',
            ['stage'],
            registry=self.registry,
        )

    def record_row(self, row: Dict):
        for component in LOSS_FIELDS:
            self.loss.labels(stage=self.stage, split=row['split'],
                             component=component).set(row[component])

    def record_progress(self, epoch: int, step: int, lr: float):
        self.epoch.labels(stage=self.stage).set(epoch)
        self.step.labels(stage=self.stage).set(step)
        self.learning_rate.labels(stage=self.stage).set(lr)

    def write(self) -> str:
        write_to_textfile(self.path, self.registry)
        logger.debug(f"Wrote Prometheus textfile {self.path}")
        return self.path
