"""
Backbone pretraining, per-task training, continual evaluation and full runs.

Example::

    config = ExperimentConfig(seed=1)
    datasets = build_datasets(config)
    backbone = pretrain_backbone(datasets["pretrain"], config).params
    report, learner = run_experiment(config, datasets, backbone)
    report.last_acc
"""

import logging
import math
import time
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from iprompt_lab import metrics
from iprompt_lab.config import ExperimentConfig
from iprompt_lab.data import Dataset, Split, iterate_batches, pretrain_class_ids, subset_by_classes
from iprompt_lab.encoder import EncoderParams, EncoderTrace, forward
from iprompt_lab.exceptions import NumericError, ProtocolError, TrainingError, UsageError
from iprompt_lab.head import HeadParams, LogitMask, masked_loss, predict
from iprompt_lab.learners import Learner, build_learner
from iprompt_lab.models import ForwardPassCounter, OnlinePoint, RunReport, TaskRecord
from iprompt_lab.numerics import AdamState, Tensor, adam_step, add, cosine_lr, mean, mul, no_grad
from iprompt_lab.reporting import auc_acc, avg_acc, forgetting, last_acc, param_ratio
from iprompt_lab.schedule import TaskSchedule, build_schedule

logger = logging.getLogger(__name__)

PRETRAIN_HOLDOUT = 0.2


def _check_loss(loss: Tensor, where: str) -> float:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingError(f"non-finite loss during {where}")
    return value


# ---------------------------------------------------------------------------
# Backbone pretraining
# ---------------------------------------------------------------------------


@dataclass
class PretrainResult:
    params: EncoderParams
    holdout_accuracy: float
    losses: list[float] = field(default_factory=list)


def pretrain_loss(trace: EncoderTrace, head: HeadParams, mask: LogitMask, labels: NDArray[np.int64]) -> Tensor:
    """
    Mean masked loss of two readouts: the class token alone, and the class
    token plus the mean image token.

    The query-function baselines classify the class token; I-Prompt starts
    from uniform token importance, which is the second readout.
    """
    pooled = add(trace.cls_output, mean(trace.image_outputs, axis=1))
    both = add(masked_loss(trace.cls_output, head, mask, labels), masked_loss(pooled, head, mask, labels))
    return mul(both, 0.5)


def pretrain_backbone(
    dataset: Dataset,
    config: ExperimentConfig,
    epochs: int | None = None,
    counter: ForwardPassCounter | None = None,
) -> PretrainResult:
    """
    Train encoder and a temporary head on the pretrain classes with
    pretrain_loss, then freeze.

    A fifth of the split is held out for the reported accuracy. The head is
    discarded.

    Raises:
        UsageError: If the dataset shares classes with the continual range.
        TrainingError: If the loss becomes non-finite.
    """
    classes = pretrain_class_ids(config)
    if set(dataset.classes) - set(classes):
        raise UsageError("pretraining data contains continual classes")
    epochs = config.training.pretrain_epochs if epochs is None else epochs
    counter = counter or ForwardPassCounter()

    rng = np.random.default_rng((config.seed, 3))
    order = rng.permutation(len(dataset))
    n_hold = int(round(len(dataset) * PRETRAIN_HOLDOUT))
    holdout, train = dataset.take(order[:n_hold]), dataset.take(order[n_hold:])

    params = EncoderParams.initialize(config.encoder, seed=config.seed)
    head = HeadParams.initialize(config.data.num_classes, config.encoder.embed_dim, 0, seed=config.seed + 1)
    mask = LogitMask.of(classes, config.data.num_classes)
    trainable = params.parameters() + head.classifier_parameters()
    state = AdamState.for_params(trainable, config.training.pretrain_lr)
    batch = config.training.batch_size
    total = epochs * math.ceil(len(train) / batch)

    losses: list[float] = []
    step = 0
    for epoch in range(epochs):
        epoch_loss = 0.0
        for images, labels in iterate_batches(train, batch, rng):
            try:
                loss = pretrain_loss(forward(images, params), head, mask, labels)
            except NumericError as exc:
                raise TrainingError(f"pretraining diverged at step {step}: {exc.message}") from exc
            counter.add("pretrain")
            epoch_loss += _check_loss(loss, "pretraining")
            loss.backward()
            adam_step(trainable, state, cosine_lr(step, total, state.base_lr))
            step += 1
        losses.append(epoch_loss / max(1, math.ceil(len(train) / batch)))
        logger.debug("Pretrain epoch %d", epoch, extra={"epoch": epoch, "loss": losses[-1]})

    params.freeze()
    accuracy = 0.0
    if len(holdout):
        correct = 0
        with no_grad():
            for images, labels in iterate_batches(holdout, config.training.eval_batch_size):
                trace = forward(images, params)
                counter.add("eval")
                correct += int(np.sum(predict(trace.cls_output, head, mask) == labels))
        accuracy = correct / len(holdout)
    logger.info("Pretrained backbone", extra={"epochs": epochs, "holdout_accuracy": accuracy, "steps": step})
    return PretrainResult(params, accuracy, losses)


# ---------------------------------------------------------------------------
# Continual training and evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    predictions: NDArray[np.int64]
    labels: NDArray[np.int64]

    def accuracy_on(self, classes: tuple[int, ...] | list[int]) -> float:
        selected = np.isin(self.labels, list(classes))
        if not selected.any():
            return 0.0
        return float(np.mean(self.predictions[selected] == self.labels[selected]))


def evaluate(learner: Learner, test: Dataset, schedule: TaskSchedule, t: int, batch_size: int) -> EvalResult:
    """
    Joint accuracy over every class seen through task ``t``; mask = seen classes.

    Raises:
        UsageError: If the seen-class test set is empty.
    """
    seen = schedule.seen_classes(t)
    subset = subset_by_classes(test, seen)
    if not len(subset):
        raise UsageError(f"no test samples for the classes seen through task {t}")
    mask = LogitMask.of(seen, learner.num_classes)
    predictions = np.concatenate(
        [learner.predict(images, mask) for images, _ in iterate_batches(subset, batch_size)]
    )
    accuracy = float(np.mean(predictions == subset.labels))
    return EvalResult(accuracy, predictions, subset.labels)


@dataclass
class TaskTrainResult:
    steps: int
    samples: int
    mean_loss: float
    seconds: float


@dataclass
class StepHook:
    """Runs online evaluations while the stream passes its checkpoints."""

    every: int
    offset: int
    callback: Callable[[int], None]
    next_at: int = 0
    seconds: float = 0.0

    def __post_init__(self) -> None:
        self.next_at = (self.offset // self.every + 1) * self.every

    def advance(self, seen_in_task: int) -> None:
        while self.offset + seen_in_task >= self.next_at:
            tick = time.perf_counter()
            self.callback(self.next_at)
            self.seconds += time.perf_counter() - tick
            self.next_at += self.every


def train_task(
    learner: Learner,
    t: int,
    train: Dataset,
    schedule: TaskSchedule,
    config: ExperimentConfig,
    epochs: int | None = None,
    step_hook: StepHook | None = None,
    check_mask_gradients: bool = False,
) -> TaskTrainResult:
    """
    Train task ``t`` under a logit mask admitting exactly its classes.

    A fresh Adam state is created per task, so masked classifier rows (zero
    gradient) do not move.

    Raises:
        ProtocolError: If the learner is not positioned at task ``t``.
        TrainingError: If the loss becomes non-finite.
    """
    if learner.current_task != t:
        raise ProtocolError(f"learner is at task {learner.current_task}, cannot train task {t}")
    classes = schedule.tasks[t]
    data = subset_by_classes(train, classes)
    if not len(data):
        raise UsageError(f"task {t} has no training samples")
    mask = LogitMask.of(classes, learner.num_classes)
    training = config.training
    epochs = training.epochs if epochs is None else epochs
    params = learner.trainable_parameters()
    state = AdamState.for_params(params, training.lr)
    rng = np.random.default_rng((config.seed, 2, t))
    total = epochs * math.ceil(len(data) / training.batch_size)
    masked_rows = ~mask.keep

    step, seen, loss_sum, seconds = 0, 0, 0.0, 0.0
    for _ in range(epochs):
        for images, labels in iterate_batches(data, training.batch_size, rng):
            tick = time.perf_counter()
            try:
                loss = learner.training_loss(images, labels, mask)
            except NumericError as exc:
                raise TrainingError(f"task {t} diverged at step {step}: {exc.message}") from exc
            loss_sum += _check_loss(loss, f"task {t}")
            loss.backward()
            learner.mask_frozen_gradients()
            if check_mask_gradients:
                grad = learner.head.weight.grad
                if grad is not None and np.any(grad[masked_rows] != 0.0):
                    raise TrainingError(f"masked classifier rows received gradient at step {step}")
            adam_step(params, state, cosine_lr(step, total, training.lr))
            elapsed = time.perf_counter() - tick
            seconds += elapsed
            metrics.record_optimizer_step(learner.method)
            metrics.record_step_duration(learner.method, elapsed)
            step += 1
            seen += len(labels)
            if step_hook is not None:
                step_hook.advance(seen)
    mean_loss = loss_sum / max(step, 1)
    logger.info(
        "Trained task %d",
        t,
        extra={"method": learner.method, "task": t, "steps": step, "loss": mean_loss},
    )
    return TaskTrainResult(step, seen, mean_loss, seconds)


# ---------------------------------------------------------------------------
# Full runs
# ---------------------------------------------------------------------------


def experiment_schedule(config: ExperimentConfig) -> TaskSchedule:
    schedule = build_schedule(config.schedule.spec, config.data.continual_classes, config.schedule_seed)
    return schedule.joint() if config.prompt.method == "joint" else schedule


def run_experiment(
    config: ExperimentConfig,
    datasets: Mapping[Split, Dataset],
    backbone: EncoderParams,
    check_mask_gradients: bool = False,
) -> tuple[RunReport, Learner]:
    """
    Train and evaluate one method over the configured schedule.

    In online mode every task is a single pass and the joint seen-class
    accuracy is also measured every ``eval_interval`` of the whole stream.

    Returns:
        The report and the trained learner (for snapshots and checks).
    """
    schedule = experiment_schedule(config)
    counter = ForwardPassCounter()
    learner = build_learner(backbone, config, schedule.num_tasks, counter)
    train, test = datasets["train"], datasets["test"]
    training = config.training
    timing = config.report.record_timing
    online = training.online
    stream_total = sum(len(subset_by_classes(train, task)) for task in schedule.tasks)
    every = max(1, math.ceil(stream_total * training.eval_interval))

    report = RunReport(
        name=config.name,
        seed=config.seed,
        method=learner.method,
        scenario=schedule.scenario,
        task_sizes=schedule.sizes,
    )
    offset = 0
    total_seconds, eval_seconds, online_seconds, eval_images = 0.0, 0.0, 0.0, 0
    logger.info(
        "Starting run %s",
        config.name,
        extra={"method": learner.method, "scenario": schedule.scenario, "tasks": schedule.num_tasks},
    )
    for t in range(schedule.num_tasks):
        before = counter.snapshot()
        learner.start_task(t)
        hook = None
        if online:

            def record_point(samples: int, _t: int = t) -> None:
                result = evaluate(learner, test, schedule, _t, training.eval_batch_size)
                report.online_curve.append(OnlinePoint(samples_seen=samples, accuracy=result.accuracy))

            hook = StepHook(every=every, offset=offset, callback=record_point)
        result = train_task(
            learner,
            t,
            train,
            schedule,
            config,
            epochs=1 if online else None,
            step_hook=hook,
            check_mask_gradients=check_mask_gradients,
        )
        offset += result.samples
        total_seconds += result.seconds
        if hook is not None:
            online_seconds += hook.seconds

        tick = time.perf_counter()
        evaluation = evaluate(learner, test, schedule, t, training.eval_batch_size)
        eval_elapsed = time.perf_counter() - tick
        eval_seconds += eval_elapsed
        eval_images += len(evaluation.labels)

        per_task = [evaluation.accuracy_on(schedule.tasks[u]) for u in range(t + 1)]
        report.accuracy_matrix.append(per_task)
        report.task_accuracies.append(evaluation.accuracy)
        report.train_steps += result.steps
        after = counter.snapshot()
        report.tasks.append(
            TaskRecord(
                task=t,
                classes=list(schedule.tasks[t]),
                train_samples=result.samples,
                test_samples=len(evaluation.labels),
                steps=result.steps,
                accuracy=evaluation.accuracy,
                per_task_accuracy=per_task,
                mean_loss=result.mean_loss,
                forward_passes={k: after[k] - before.get(k, 0) for k in after},
                train_ms=result.seconds * 1000.0 if timing else None,
                eval_ms=eval_elapsed * 1000.0 if timing else None,
            )
        )
        metrics.record_task_accuracy(learner.method, evaluation.accuracy)
        logger.info(
            "Task %d accuracy %.4f",
            t,
            evaluation.accuracy,
            extra={"method": learner.method, "task": t, "accuracy": evaluation.accuracy},
        )
    learner.finish()

    report.avg_acc = avg_acc(report.task_accuracies)
    report.last_acc = last_acc(report.task_accuracies)
    report.forgetting = forgetting(report.accuracy_matrix)
    if online:
        curve = report.online_curve
        if not curve or curve[-1].samples_seen < offset:
            # the final joint evaluation closes the stream
            curve.append(OnlinePoint(samples_seen=offset, accuracy=report.task_accuracies[-1]))
        report.auc_acc = auc_acc(curve, total_samples=offset)
    report.trainable_params, report.total_params, report.param_ratio = param_ratio(learner)
    report.forward_passes = counter.snapshot()
    if timing:
        report.wall_ms = (total_seconds + eval_seconds + online_seconds) * 1000.0
        report.ms_per_step = total_seconds * 1000.0 / max(report.train_steps, 1)
        report.ms_per_image = eval_seconds * 1000.0 / max(eval_images, 1)
    return report, learner
