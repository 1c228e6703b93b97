"""
Data models for iprompt-lab.

Defines the forward-pass counter shared by learners and the harness, and the
pydantic report records (TaskRecord, RunReport) written to JSON lines.
"""

from dataclasses import dataclass, field
from typing import NewType

from pydantic import BaseModel, ConfigDict, Field

from iprompt_lab import metrics

# ---------------------------------------------------------------------------
# NewTypes
# ---------------------------------------------------------------------------

ClassId = NewType("ClassId", int)
"""Global class id of the synthetic world."""

TaskId = NewType("TaskId", int)
"""Zero-based index of a task in a schedule."""

PHASES = ("pretrain", "train", "query", "eval")


# ---------------------------------------------------------------------------
# Forward-pass accounting
# ---------------------------------------------------------------------------


@dataclass
class ForwardPassCounter:
    """
    Exact encoder-invocation counts per phase.

    ``train`` counts prompted training passes, ``query`` the extra
    unprompted passes baselines spend on their query function, ``eval``
    every pass spent on evaluation (query passes included).
    """

    counts: dict[str, int] = field(default_factory=lambda: {phase: 0 for phase in PHASES})

    def add(self, phase: str, n: int = 1) -> None:
        self.counts[phase] = self.counts.get(phase, 0) + n
        metrics.record_forward_passes(phase, n)

    def __getitem__(self, phase: str) -> int:
        return self.counts.get(phase, 0)

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def snapshot(self) -> dict[str, int]:
        return dict(self.counts)


# ---------------------------------------------------------------------------
# Report records
# ---------------------------------------------------------------------------


class OnlinePoint(BaseModel):
    """One periodic evaluation of an online stream."""

    model_config = ConfigDict(frozen=True)

    samples_seen: int
    accuracy: float


class TaskRecord(BaseModel):
    """
    What happened during one task.

    Attributes:
        task: Task index.
        classes: Classes introduced by the task.
        accuracy: Joint accuracy A_t over every class seen so far.
        per_task_accuracy: Accuracy on the classes of each task ``<= task``.
        steps: Optimizer steps spent on the task.
        forward_passes: Encoder invocations per phase during the task.
        train_ms: Wall-clock training time (only with timing enabled).
    """

    model_config = ConfigDict(extra="forbid")

    task: int
    classes: list[int]
    train_samples: int
    test_samples: int
    steps: int
    accuracy: float
    per_task_accuracy: list[float]
    mean_loss: float
    forward_passes: dict[str, int]
    train_ms: float | None = None
    eval_ms: float | None = None


class RunReport(BaseModel):
    """
    Full outcome of one continual run.

    ``accuracy_matrix[t][u]`` is the accuracy on task ``u``'s classes after
    training task ``t`` (``u <= t``); ``task_accuracies[t]`` is the joint
    seen-class accuracy A_t.
    """

    model_config = ConfigDict(extra="forbid")

    name: str
    seed: int
    method: str
    scenario: str
    task_sizes: list[int]
    tasks: list[TaskRecord] = Field(default_factory=list)
    accuracy_matrix: list[list[float]] = Field(default_factory=list)
    task_accuracies: list[float] = Field(default_factory=list)
    avg_acc: float = 0.0
    last_acc: float = 0.0
    auc_acc: float | None = None
    forgetting: list[float] = Field(default_factory=list)
    online_curve: list[OnlinePoint] = Field(default_factory=list)
    trainable_params: int = 0
    total_params: int = 0
    param_ratio: float = 0.0
    forward_passes: dict[str, int] = Field(default_factory=dict)
    train_steps: int = 0
    wall_ms: float | None = None
    ms_per_step: float | None = None
    ms_per_image: float | None = None
