"""
Training progress and process resource monitoring
"""
import os
import time
import psutil
import logging
from collections import deque
from datetime import datetime
from typing import Deque, Optional
from dataclasses import dataclass

logger = logging.getLogger(__name__)

@dataclass
class ResourceSnapshot:
    """Process resource usage at one instant"""
    cpu_percent: float
    rss_mb: float
    memory_percent: float
    system_memory_percent: float
    timestamp: str

@dataclass
class TrainingMetrics:
    """Aggregated training progress"""
    elapsed_seconds: float
    iterations: int
    iterations_per_second: float
    last_loss: float
    mean_recent_loss: float
    phase: str

class TrainingMonitor:
    """Collects per-iteration losses and timings plus resource snapshots"""

    def __init__(self, log_every: Optional[int] = None, window: int = 100):
        if log_every is None:
            log_every = int(os.environ.get('DEPTHFUSE_RESOURCE_LOG_EVERY', '50'))
        self.log_every = max(log_every, 0)
        self.start_time = time.time()
        self.iterations = 0
        self.phase = ''
        self.last_loss = float('nan')
        self.recent_losses: Deque[float] = deque(maxlen=window)
        self.iteration_seconds: Deque[float] = deque(maxlen=window)
        self._process = psutil.Process(os.getpid())
        # first cpu_percent call only primes the counter
        self._process.cpu_percent(interval=None)

    def record_iteration(self, phase: str, loss: float, seconds: float):
        """Record one optimizer step; logs resources every `log_every` steps"""
        if phase != self.phase:
            logger.info(f"Entering training phase '{phase}' at iteration {self.iterations}")
            self.phase = phase

        self.iterations += 1
        self.last_loss = loss
        self.recent_losses.append(loss)
        self.iteration_seconds.append(seconds)

        if self.log_every and self.iterations % self.log_every == 0:
            self.log_resources()

    def get_resource_snapshot(self) -> ResourceSnapshot:
        """Collect current process metrics"""
        try:
            memory_info = self._process.memory_info()
            return ResourceSnapshot(
                cpu_percent=round(self._process.cpu_percent(interval=None), 2),
                rss_mb=round(memory_info.rss / (1024 * 1024), 2),
                memory_percent=round(self._process.memory_percent(), 2),
                system_memory_percent=round(psutil.virtual_memory().percent, 2),
                timestamp=datetime.utcnow().isoformat()
            )

        except psutil.Error as e:
            logger.error(f"Error collecting resource metrics: {e}")
            return ResourceSnapshot(
                cpu_percent=0.0, rss_mb=0.0, memory_percent=0.0,
                system_memory_percent=0.0, timestamp=datetime.utcnow().isoformat()
            )

    def get_training_metrics(self) -> TrainingMetrics:
        """Summarize progress over the recent window"""
        seconds = sum(self.iteration_seconds)
        losses = list(self.recent_losses)
        return TrainingMetrics(
            elapsed_seconds=round(time.time() - self.start_time, 2),
            iterations=self.iterations,
            iterations_per_second=round(len(self.iteration_seconds) / seconds, 3) if seconds > 0 else 0.0,
            last_loss=self.last_loss,
            mean_recent_loss=sum(losses) / len(losses) if losses else float('nan'),
            phase=self.phase
        )

    def log_resources(self):
        snapshot = self.get_resource_snapshot()
        metrics = self.get_training_metrics()
        logger.info(
            f"iter {metrics.iterations} [{metrics.phase}] loss {metrics.mean_recent_loss:.4f} | "
            f"{metrics.iterations_per_second} it/s | cpu {snapshot.cpu_percent}% | "
            f"rss {snapshot.rss_mb} MB"
        )
