"""
Class-incremental task schedules.

Supported scenario specs:

    B<X>-Inc<Y>      X base classes, then Y new classes per task
    uniform          five equal tasks
    increasing       task sizes growing as 10, 15, 20, 25, 30 (scaled)
    decreasing       task sizes shrinking as 30, 25, 20, 15, 10 (scaled)
    fluctuating      task sizes 10, 30, 5, 40, 15 (scaled)
    random-increase  seeded sizes drawn from [1, total/3]
    sizes:a,b,c      explicit task sizes

Class ids are assigned to tasks by a seeded shuffle.
"""

import logging
import math
import re
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from iprompt_lab.exceptions import ScheduleError

logger = logging.getLogger(__name__)

_BX_INCY = re.compile(r"^B(\d+)-Inc(\d+)$", re.IGNORECASE)

TEMPLATES: dict[str, tuple[int, ...]] = {
    "uniform": (20, 20, 20, 20, 20),
    "increasing": (10, 15, 20, 25, 30),
    "decreasing": (30, 25, 20, 15, 10),
    "fluctuating": (10, 30, 5, 40, 15),
}


@dataclass(frozen=True)
class TaskSchedule:
    """
    Ordered, pairwise disjoint, non-empty class sets covering the class range.

    Raises:
        ScheduleError: On construction if any of those properties fails.
    """

    tasks: tuple[tuple[int, ...], ...]
    scenario: str
    total_classes: int

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ScheduleError("a schedule needs at least one task")
        if any(not task for task in self.tasks):
            raise ScheduleError("schedule contains an empty task")
        flat = [c for task in self.tasks for c in task]
        if len(flat) != len(set(flat)):
            raise ScheduleError("schedule tasks overlap")
        if sorted(flat) != list(range(self.total_classes)):
            raise ScheduleError(f"schedule does not cover classes [0, {self.total_classes})")

    @property
    def num_tasks(self) -> int:
        return len(self.tasks)

    @property
    def sizes(self) -> list[int]:
        return [len(task) for task in self.tasks]

    def seen_classes(self, t: int) -> list[int]:
        """All classes of tasks ``0..t``, sorted."""
        return sorted(c for task in self.tasks[: t + 1] for c in task)

    def task_of(self, class_id: int) -> int:
        for t, task in enumerate(self.tasks):
            if class_id in task:
                return t
        raise ScheduleError(f"class {class_id} is not scheduled")

    def joint(self) -> "TaskSchedule":
        """One task holding every class (joint-training upper bound)."""
        every = tuple(sorted(c for task in self.tasks for c in task))
        return TaskSchedule((every,), f"{self.scenario}/joint", self.total_classes)


def scale_sizes(proportions: Sequence[int], total: int) -> list[int]:
    """
    Scale a size template to ``total`` classes, every task getting at least one.

    Uses largest-remainder rounding so the sizes sum exactly to ``total``.
    """
    if total < len(proportions):
        raise ScheduleError(f"{total} classes cannot fill {len(proportions)} tasks")
    weight = sum(proportions)
    raw = [p * total / weight for p in proportions]
    sizes = [max(1, math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    i = 0
    while sum(sizes) < total:
        sizes[order[i % len(order)]] += 1
        i += 1
    while sum(sizes) > total:
        largest = max(range(len(sizes)), key=lambda j: (sizes[j], -j))
        sizes[largest] -= 1
    return sizes


def _bx_incy(base: int, step: int, total: int) -> list[int]:
    if step == 0:
        raise ScheduleError("increment Y must be positive")
    if base > total:
        raise ScheduleError(f"base {base} exceeds {total} classes")
    sizes = [base] if base else []
    remaining = total - base
    while remaining > 0:
        sizes.append(min(step, remaining))
        remaining -= sizes[-1]
    return sizes


def _random_increase(total: int, rng: np.random.Generator) -> list[int]:
    upper = max(1, total // 3)
    sizes: list[int] = []
    remaining = total
    while remaining > 0:
        sizes.append(min(int(rng.integers(1, upper + 1)), remaining))
        remaining -= sizes[-1]
    return sizes


def parse_sizes(spec: str | Sequence[int], total_classes: int, seed: int) -> tuple[list[int], str]:
    """Resolve a scenario spec to task sizes and a scenario name."""
    if not isinstance(spec, str):
        sizes, name = [int(s) for s in spec], "sizes:" + ",".join(str(int(s)) for s in spec)
    else:
        name = spec.strip()
        key = name.lower()
        if match := _BX_INCY.match(name):
            sizes = _bx_incy(int(match.group(1)), int(match.group(2)), total_classes)
        elif key in TEMPLATES:
            sizes = scale_sizes(TEMPLATES[key], total_classes)
        elif key == "random-increase":
            sizes = _random_increase(total_classes, np.random.default_rng((seed, 1)))
        elif key.startswith("sizes:"):
            try:
                sizes = [int(part) for part in key[len("sizes:") :].split(",") if part.strip()]
            except ValueError as exc:
                raise ScheduleError(f"bad explicit sizes {spec!r}") from exc
        else:
            raise ScheduleError(f"unknown schedule spec {spec!r}")
    if any(s <= 0 for s in sizes):
        raise ScheduleError("task sizes must be positive")
    if sum(sizes) != total_classes:
        raise ScheduleError(f"task sizes {sizes} sum to {sum(sizes)}, expected {total_classes}")
    return sizes, name


def build_schedule(spec: str | Sequence[int], total_classes: int, seed: int = 0, shuffle: bool = True) -> TaskSchedule:
    """
    Build a class-incremental schedule.

    Args:
        spec: Scenario name or explicit task sizes.
        total_classes: Number of continual classes (ids ``0..total-1``).
        seed: Drives the class shuffle and random-increase sizes.
        shuffle: Assign classes by seeded shuffle (otherwise in id order).

    Raises:
        ScheduleError: If the spec is unknown or cannot cover the classes.
    """
    if total_classes <= 0:
        raise ScheduleError("a schedule needs at least one class")
    sizes, name = parse_sizes(spec, total_classes, seed)
    order = np.arange(total_classes)
    if shuffle:
        order = np.random.default_rng((seed, 0)).permutation(total_classes)
    bounds = np.cumsum([0, *sizes])
    tasks = tuple(tuple(sorted(int(c) for c in order[a:b])) for a, b in zip(bounds[:-1], bounds[1:], strict=True))
    schedule = TaskSchedule(tasks, name, total_classes)
    logger.debug("Built schedule %s", name, extra={"sizes": sizes, "seed": seed})
    return schedule
