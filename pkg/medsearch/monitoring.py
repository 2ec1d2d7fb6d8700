"""
Stage timing for pipeline commands.

Commands wrap each stage in a :class:`StageTimer` so the log shows what ran,
for how long, and with which counts.
"""
import logging
import time
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional


logger = logging.getLogger(__name__)


@dataclass
class StageMetric:
    """Data class for one completed stage."""
    stage: str
    seconds: float
    counts: Dict[str, Any] = field(default_factory=dict)
    failed: bool = False


class PerformanceMonitor:
    """
    Collects stage durations for one process.
    """

    def __init__(self):
        self.stage_times: Dict[str, List[StageMetric]] = defaultdict(list)

    def record(self, metric: StageMetric) -> None:
        self.stage_times[metric.stage].append(metric)
        level = logging.WARNING if metric.failed else logging.INFO
        logger.log(
            level,
            f"stage {metric.stage} {'failed' if metric.failed else 'finished'} "
            f"in {metric.seconds:.3f}s {metric.counts}",
            extra={'stage': metric.stage, 'counts': metric.counts}
        )

    def get_slow_stages(self, threshold: float = 60.0) -> List[Dict[str, Any]]:
        """Get stages whose slowest run exceeded ``threshold`` seconds."""
        slow = []
        for stage, metrics in self.stage_times.items():
            worst = max(m.seconds for m in metrics)
            if worst > threshold:
                slow.append({'stage': stage, 'max_seconds': worst, 'runs': len(metrics)})
        return sorted(slow, key=lambda x: x['max_seconds'], reverse=True)


performance_monitor = PerformanceMonitor()


class StageTimer:
    """Context manager timing a named stage; ``counts`` is filled by the caller."""

    def __init__(self, stage: str, monitor: Optional[PerformanceMonitor] = None):
        self.stage = stage
        self.monitor = monitor or performance_monitor
        self.counts: Dict[str, Any] = {}
        self._start = 0.0

    def __enter__(self) -> 'StageTimer':
        logger.info(f"stage {self.stage} started")
        self._start = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        self.monitor.record(StageMetric(
            stage=self.stage,
            seconds=time.perf_counter() - self._start,
            counts=dict(self.counts),
            failed=exc_type is not None,
        ))
        return False
