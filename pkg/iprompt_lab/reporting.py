"""
Continual-learning metrics and report files.

Avg-Acc is the mean of the joint seen-class accuracies after each task,
Last-Acc the accuracy after the final task, and AUC-Acc the normalised
trapezoidal area under an online accuracy-versus-samples curve.
"""

import csv
import io
import logging
from collections.abc import Sequence
from datetime import datetime, timezone
from pathlib import Path

from iprompt_lab.exceptions import UsageError
from iprompt_lab.learners import Learner
from iprompt_lab.models import OnlinePoint, RunReport

logger = logging.getLogger(__name__)

SUMMARY_COLUMNS = (
    "seed",
    "method",
    "scenario",
    "avg_acc",
    "last_acc",
    "auc_acc",
    "param_ratio",
    "forward_passes",
    "wall_ms",
)
SWEEP_COLUMNS = ("pool_size", "prompt_length", "seed", "avg_acc", "last_acc", "param_ratio")


def avg_acc(accuracies: Sequence[float]) -> float:
    if not accuracies:
        raise UsageError("Avg-Acc of an empty accuracy sequence")
    return sum(accuracies) / len(accuracies)


def last_acc(accuracies: Sequence[float]) -> float:
    if not accuracies:
        raise UsageError("Last-Acc of an empty accuracy sequence")
    return accuracies[-1]


def auc_acc(points: Sequence[OnlinePoint], total_samples: int | None = None) -> float:
    """
    Trapezoidal area under (samples seen, accuracy), divided by the total
    number of samples in the stream.

    The curve is held flat at the first accuracy back to zero samples and at
    the last accuracy out to ``total_samples`` (default: the last point).
    A flat curve at ``c`` yields ``c``.

    Raises:
        UsageError: If the curve is empty, its sample counts decrease, or
                    ``total_samples`` lies before the last point.
    """
    if not points:
        raise UsageError("AUC-Acc of an empty curve")
    total = points[-1].samples_seen if total_samples is None else total_samples
    if total < points[-1].samples_seen:
        raise UsageError(f"total_samples {total} precedes the last evaluation at {points[-1].samples_seen}")
    if total <= 0:
        if len(points) == 1:
            return points[0].accuracy
        raise UsageError("AUC-Acc needs a stream of at least one sample")
    area = points[0].samples_seen * points[0].accuracy
    for left, right in zip(points[:-1], points[1:], strict=True):
        width = right.samples_seen - left.samples_seen
        if width < 0:
            raise UsageError("AUC-Acc needs non-decreasing sample counts")
        area += width * (left.accuracy + right.accuracy) / 2.0
    area += (total - points[-1].samples_seen) * points[-1].accuracy
    return area / total


def forgetting(matrix: Sequence[Sequence[float]]) -> list[float]:
    """
    Per-task maximum forgetting after the final task.

    ``matrix[t][u]`` is the accuracy on task ``u`` after training task ``t``.
    The final task itself has no forgetting and is omitted.
    """
    if not matrix:
        return []
    final = matrix[-1]
    out = []
    for u in range(len(matrix) - 1):
        best = max(row[u] for row in matrix[u:-1])
        out.append(best - final[u])
    return out


def param_ratio(learner: Learner) -> tuple[int, int, float]:
    """``(learnable, total, learnable / total)`` for a learner's whole schedule."""
    learnable = learner.learnable_parameter_count()
    total = learner.total_parameter_count()
    return learnable, total, learnable / total


def _fmt(value: float | int | None) -> str:
    if value is None:
        return ""
    if isinstance(value, int):
        return str(value)
    return f"{value:.6f}"


def summary_row(report: RunReport) -> dict[str, str]:
    return {
        "seed": str(report.seed),
        "method": report.method,
        "scenario": report.scenario,
        "avg_acc": _fmt(report.avg_acc),
        "last_acc": _fmt(report.last_acc),
        "auc_acc": _fmt(report.auc_acc),
        "param_ratio": _fmt(report.param_ratio),
        "forward_passes": str(sum(report.forward_passes.values())),
        "wall_ms": _fmt(report.wall_ms),
    }


def render_csv(rows: Sequence[dict[str, str]], columns: Sequence[str]) -> str:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buffer.getvalue()


def render_tasks_jsonl(report: RunReport) -> str:
    """One JSON record per task followed by the run summary record."""
    lines = [task.model_dump_json() for task in report.tasks]
    lines.append(report.model_dump_json(exclude={"tasks"}))
    return "\n".join(lines) + "\n"


def render_table(reports: Sequence[RunReport]) -> str:
    """Per-method means as a fixed-width text table."""
    by_method: dict[str, list[RunReport]] = {}
    for report in reports:
        by_method.setdefault(report.method, []).append(report)
    header = f"{'method':<20} {'runs':>4} {'avg_acc':>8} {'last_acc':>8} {'param_ratio':>11} {'passes/step':>11}"
    lines = [header, "-" * len(header)]
    for method, group in by_method.items():
        steps = sum(r.train_steps for r in group)
        passes = sum(r.forward_passes.get("train", 0) + r.forward_passes.get("query", 0) for r in group)
        per_step = passes / steps if steps else 0.0
        lines.append(
            f"{method:<20} {len(group):>4} "
            f"{sum(r.avg_acc for r in group) / len(group):>8.4f} "
            f"{sum(r.last_acc for r in group) / len(group):>8.4f} "
            f"{group[0].param_ratio:>11.6f} {per_step:>11.2f}"
        )
    return "\n".join(lines) + "\n"


def resolve_output_dir(base: Path, name: str, overwrite: bool) -> Path:
    """
    ``base/name`` when free or when overwriting; otherwise a timestamped sibling.

    Reports are never overwritten silently.
    """
    target = base / name
    if overwrite or not target.exists():
        return target
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    return base / f"{name}-{stamp}"


def write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    logger.info("Wrote %s", path, extra={"bytes": len(text)})


def write_run_report(directory: Path, report: RunReport) -> None:
    write_text(directory / "tasks.jsonl", render_tasks_jsonl(report))
    write_text(directory / "summary.csv", render_csv([summary_row(report)], SUMMARY_COLUMNS))


def sweep_row(report: RunReport, pool_size: int, prompt_length: int) -> dict[str, str]:
    return {
        "pool_size": str(pool_size),
        "prompt_length": str(prompt_length),
        "seed": str(report.seed),
        "avg_acc": _fmt(report.avg_acc),
        "last_acc": _fmt(report.last_acc),
        "param_ratio": _fmt(report.param_ratio),
    }
