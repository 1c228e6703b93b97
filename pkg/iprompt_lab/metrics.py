"""
Prometheus metrics for iprompt-lab.

Counts encoder invocations and optimizer steps and observes step durations
and task-boundary accuracies. Requires the ``metrics`` optional extra:

    pip install iprompt-lab[metrics]

Metrics are recorded only when ``prometheus-client`` is installed and
recording has been switched on with enable() (the CLI does this when the
experiment sets ``metrics_enabled``). Otherwise every ``record_*`` function
is a no-op. Report numbers never depend on these metrics.

Metric names
------------
- ``iprompt_lab_encoder_forward_passes_total{phase}``  (train|query|eval|pretrain)
- ``iprompt_lab_optimizer_steps_total{method}``
- ``iprompt_lab_step_duration_seconds{method}``
- ``iprompt_lab_task_accuracy{method}``
"""

import logging
from typing import Any

logger = logging.getLogger(__name__)

_DURATION_BUCKETS = (0.001, 0.0025, 0.005, 0.01, 0.025, 0.05, 0.1, 0.25, 0.5, 1.0)
_ACCURACY_BUCKETS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 1.0)

# metric objects by name; registering twice in one process raises
_registry: dict[str, Any] = {}
_enabled = False


def enable(flag: bool = True) -> None:
    global _enabled
    _enabled = flag
    logger.debug("Prometheus recording %s", "enabled" if flag else "disabled")


def _get_or_create_counter(name: str, doc: str, labels: list[str] | None = None) -> Any:
    if name not in _registry:
        from prometheus_client import Counter

        _registry[name] = Counter(name, doc, labels or [])
    return _registry[name]


def _get_or_create_histogram(
    name: str,
    doc: str,
    labels: list[str] | None = None,
    buckets: tuple[float, ...] = _DURATION_BUCKETS,
) -> Any:
    if name not in _registry:
        from prometheus_client import Histogram

        _registry[name] = Histogram(name, doc, labels or [], buckets=buckets)
    return _registry[name]


def _prometheus_available() -> bool:
    try:
        import prometheus_client  # noqa: F401

        return True
    except ImportError:
        return False


def _recording() -> bool:
    return _enabled and _prometheus_available()


def record_forward_passes(phase: str, count: int = 1) -> None:
    """
    Add encoder invocations.

    Args:
        phase: One of ``train``, ``query``, ``eval``, ``pretrain``.
        count: Number of invocations.
    """
    if not _recording():
        return
    _get_or_create_counter(
        "iprompt_lab_encoder_forward_passes_total",
        "Total number of encoder invocations.",
        ["phase"],
    ).labels(phase=phase).inc(count)


def record_optimizer_step(method: str) -> None:
    if not _recording():
        return
    _get_or_create_counter(
        "iprompt_lab_optimizer_steps_total",
        "Total number of optimizer steps.",
        ["method"],
    ).labels(method=method).inc()


def record_step_duration(method: str, seconds: float) -> None:
    """Observe the wall-clock duration of one optimization step."""
    if not _recording():
        return
    _get_or_create_histogram(
        "iprompt_lab_step_duration_seconds",
        "Duration of optimization steps in seconds.",
        ["method"],
    ).labels(method=method).observe(seconds)


def record_task_accuracy(method: str, accuracy: float) -> None:
    if not _recording():
        return
    _get_or_create_histogram(
        "iprompt_lab_task_accuracy",
        "Joint seen-class accuracy at task boundaries.",
        ["method"],
        buckets=_ACCURACY_BUCKETS,
    ).labels(method=method).observe(accuracy)
