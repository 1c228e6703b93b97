"""
Self-verification suite behind ``iprompt-lab verify``.

Each check builds a small deterministic instance, compares the library
against an independent oracle (finite differences, explicit loops, closed
forms) and returns a CheckResult. run_checks() raises VerificationError when
any check fails.
"""

import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from iprompt_lab.config import ExperimentConfig
from iprompt_lab.data import SyntheticSpec, build_datasets, generate
from iprompt_lab.encoder import EncoderParams, LayerPrompt, forward, mhsa, tokenize, transformer_layer
from iprompt_lab.exceptions import IPromptLabError, UsageError, VerificationError
from iprompt_lab.harness import run_experiment
from iprompt_lab.head import LogitMask, importance_weights
from iprompt_lab.learners import IPromptLearner, build_learner
from iprompt_lab.models import OnlinePoint
from iprompt_lab.numerics import Tensor, grad_check, layernorm
from iprompt_lab.prompts import (
    BaselineMatcherParams,
    PromptPool,
    attention_select,
    compose_prompt,
    querykey_select,
    semantic_match,
)
from iprompt_lab.reporting import auc_acc, avg_acc, last_acc, param_ratio, render_tasks_jsonl

logger = logging.getLogger(__name__)

ORACLE_TOL = 1e-12
GRAD_TOL = 1e-4
GRAD_ABS_TOL = 5e-8
GRAD_STEP = 1e-5
GRAD_REL_THRESHOLD = 1e-4
PERMUTATION_TOL = 1e-10
ORACLE_INSTANCES = 50


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def toy_config(**overrides: object) -> ExperimentConfig:
    """d=16, 2 layers, 4 patches, pool of 4 single-row prompts."""
    values: dict[str, object] = {
        "seed": 0,
        "name": "toy",
        "encoder": {
            "image_size": 8,
            "patch_size": 4,
            "channels": 3,
            "embed_dim": 16,
            "num_heads": 2,
            "num_layers": 2,
            "mlp_ratio": 2.0,
            "prompted_layers": (0, 1),
        },
        "prompt": {"pool_size": 4, "prompt_length": 1},
        "schedule": {"spec": "B0-Inc2"},
        "training": {"epochs": 1, "batch_size": 8, "eval_batch_size": 16},
        "data": {"num_classes": 12, "pretrain_classes": 4, "train_per_class": 4, "test_per_class": 2},
    }
    values.update(overrides)
    return ExperimentConfig(**values)  # type: ignore[arg-type]


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------


def check_gradients() -> str:
    """Full I-Prompt masked loss: autodiff vs central differences per trainable tensor."""
    config = toy_config()
    backbone = EncoderParams.initialize(config.encoder, seed=5, frozen=True)
    learner = IPromptLearner(backbone, config, num_tasks=2)
    learner.start_task(0)
    learner.start_task(1)
    rng = np.random.default_rng(11)
    images = rng.normal(size=(3, 3, 8, 8))
    labels = np.array([2, 3, 2])
    mask = LogitMask.of([2, 3], learner.num_classes)
    # W and W_s start at zero; move them so gradient reaches h and importance varies
    learner.head.weight.data[:] = rng.normal(scale=0.3, size=learner.head.weight.shape)
    learner.head.importance.data[:] = rng.normal(size=learner.head.importance.shape)

    worst_rel, worst_abs, checked, size = 0.0, 0.0, 0, 0
    for tensor in learner.trainable_parameters():

        def loss_of(_: Tensor) -> Tensor:
            return learner.training_loss(images, labels, mask)

        result = grad_check(loss_of, tensor, h=GRAD_STEP, rel_threshold=GRAD_REL_THRESHOLD)
        worst_rel, worst_abs = max(worst_rel, result.max_rel), max(worst_abs, result.max_abs)
        checked, size = checked + result.rel_checked, size + result.size
        for other in learner.trainable_parameters():
            other.zero_grad()
    if worst_rel >= GRAD_TOL:
        raise VerificationError(
            f"max relative gradient error {worst_rel:.2e} over {checked} entries with |g| >= {GRAD_REL_THRESHOLD:g}"
        )
    if worst_abs >= GRAD_ABS_TOL:
        raise VerificationError(f"max absolute gradient error {worst_abs:.2e} over {size} entries")
    return f"max relative error {worst_rel:.2e} ({checked}/{size} entries), max absolute error {worst_abs:.2e}"


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-8))


def check_matching_oracles() -> str:
    """semantic_match, compose_prompt, querykey/attention selection and importance vs loops."""
    worst = 0.0
    for seed in range(ORACLE_INSTANCES):
        rng = np.random.default_rng((17, seed))
        d, tokens, lp = 6, 5, 2
        pool = PromptPool(pool_size=4, prompt_length=lp, embed_dim=d, layers=[0], num_tasks=2, seed=seed)
        pool.start_task(0)
        pool.start_task(1)
        h_k = Tensor(rng.normal(size=(tokens, d)))
        weights = semantic_match(h_k, pool, 0)
        keys = pool.active_keys(0).data
        prompts = pool.active_prompts(0).data
        for t in range(tokens):
            for i in range(keys.shape[0]):
                worst = max(worst, abs(weights.data[t, i] - _cos(h_k.data[t], keys[i])))

        offsets = compose_prompt(weights, pool, 1, 0)
        assert offsets.key_offset is not None and offsets.value_offset is not None
        for t in range(1, tokens):
            key_row = np.zeros(d)
            value_row = np.zeros(d)
            for i in range(keys.shape[0]):
                for r in range(lp):
                    key_row += weights.data[t, i] * prompts[i, r]
                    value_row += weights.data[t, i] * prompts[i, lp + r]
            worst = max(worst, float(np.max(np.abs(offsets.key_offset.data[t] - key_row))))
            worst = max(worst, float(np.max(np.abs(offsets.value_offset.data[t] - value_row))))
        worst = max(worst, float(np.max(np.abs(offsets.key_offset.data[0]))))

        matcher = BaselineMatcherParams(prompt_length=lp, embed_dim=d, layers=(0,), attention=True, seed=seed)
        for t in range(4):
            matcher.start_task(t)
            matcher.attn_vectors[t].data[:] = rng.normal(size=d)
        q = Tensor(rng.normal(size=d))
        scores = [_cos(q.data, k.data) for k in matcher.keys]
        expected = max(range(4), key=lambda i: (scores[i], -i))
        if int(querykey_select(q, matcher, 4)[0]) != expected:
            raise VerificationError(f"querykey_select disagrees with linear scan (instance {seed})")

        soft = attention_select(q, matcher, 3, 0).data
        oracle = np.zeros_like(soft)
        for i in range(3):
            oracle += _cos(q.data * matcher.attn_vectors[i].data, matcher.keys[i].data) * matcher.blocks[0][i].data
        worst = max(worst, float(np.max(np.abs(soft - oracle))))

        w_s = Tensor(rng.normal(size=keys.shape[0]))
        importance = importance_weights(h_k, Tensor(keys), w_s).data
        raw = np.array(
            [sum(w_s.data[j] * _cos(h_k.data[t], keys[j]) for j in range(keys.shape[0])) for t in range(1, tokens)]
        )
        oracle_imp = np.exp(raw - raw.max()) / np.exp(raw - raw.max()).sum()
        worst = max(worst, float(np.max(np.abs(importance - oracle_imp))))
    if worst > ORACLE_TOL:
        raise VerificationError(f"oracle disagreement {worst:.2e}")
    return f"{ORACLE_INSTANCES} instances, max deviation {worst:.2e}"


def check_encoder_invariants() -> str:
    """Patch-permutation equivariance, zero-offset identity and zero-MLP passthrough."""
    config = toy_config()
    enc = config.encoder
    backbone = EncoderParams.initialize(enc, seed=5, frozen=True)
    images = np.random.default_rng(23).normal(size=(2, enc.channels, enc.image_size, enc.image_size))
    plain = forward(images, backbone)

    worst = 0.0
    p = enc.num_patches
    for shift in range(1, p):
        order = [0] + [1 + (i + shift) % p for i in range(p)]
        permuted = forward(images, backbone, token_transform=lambda h0, o=order: Tensor(h0.data[:, o, :]))
        worst = max(worst, float(np.max(np.abs(permuted.cls_output.data - plain.cls_output.data))))
    if worst > PERMUTATION_TOL:
        raise VerificationError(f"patch permutation moved the class token by {worst:.2e}")

    def zero_offsets(layer: int, h_k: Tensor) -> LayerPrompt:
        zeros = Tensor(np.zeros(h_k.shape))
        return LayerPrompt(key_offset=zeros, value_offset=zeros)

    if not np.array_equal(forward(images, backbone, zero_offsets).output.data, plain.output.data):
        raise VerificationError("all-zero offsets changed the encoder output")

    params = backbone.clone(trainable=True)
    layer = params.layers[0]
    layer.w_fc2.data[:] = 0.0
    layer.b_fc2.data[:] = 0.0
    h = tokenize(images, params)
    out, _ = transformer_layer(h, layer, enc)
    attn, _ = mhsa(layernorm(h, layer.ln1_gain, layer.ln1_bias, enc.layernorm_eps), layer, enc)
    if not np.array_equal(out.data, attn.data + h.data):
        raise VerificationError("a zero MLP does not pass the attention residual through")
    return f"{p - 1} patch rotations within {worst:.2e}, zero offsets and zero MLP exact"


def check_metric_identities() -> str:
    accuracies = [0.8, 0.7]
    if abs(avg_acc(accuracies) - 0.75) > ORACLE_TOL or last_acc(accuracies) != 0.7:
        raise VerificationError("Avg/Last accuracy formulas")
    curve = [OnlinePoint(samples_seen=s, accuracy=0.625) for s in (10, 20, 35, 60)]
    if abs(auc_acc(curve) - 0.625) > ORACLE_TOL:
        raise VerificationError("flat online curve must give AUC equal to its level")
    return "Avg/Last/AUC identities hold"


def _continual_run(config: ExperimentConfig) -> tuple[str, bool, dict[str, int], int]:
    datasets = build_datasets(config)
    backbone = EncoderParams.initialize(config.encoder, seed=config.seed, frozen=True)
    fingerprint = backbone.fingerprint()
    report, learner = run_experiment(config, datasets, backbone, check_mask_gradients=True)
    intact = backbone.fingerprint() == fingerprint and learner.frozen_intact()
    train_passes = {k: sum(t.forward_passes.get(k, 0) for t in report.tasks) for k in ("train", "query")}
    return render_tasks_jsonl(report), intact, train_passes, report.train_steps


def check_continual_contracts() -> str:
    """Frozen backbone/chunks, masked-row gradients, pass counts and determinism on a 4-task run."""
    config = toy_config()
    first, intact, passes, steps = _continual_run(config)
    if not intact:
        raise VerificationError("frozen backbone, prompt chunk or importance entry changed during training")
    if passes["train"] != steps or passes["query"] != 0:
        raise VerificationError(f"iprompt used {passes} encoder passes for {steps} steps")
    second, *_ = _continual_run(config)
    if first != second:
        raise VerificationError("identical configs produced different reports")

    baseline = toy_config(prompt={"pool_size": 4, "prompt_length": 1, "method": "querykey_baseline"})
    _, intact, passes, steps = _continual_run(baseline)
    if not intact:
        raise VerificationError("query-key baseline mutated frozen task prompts")
    if passes["train"] + passes["query"] != 2 * steps:
        raise VerificationError(f"query-key baseline used {passes} encoder passes for {steps} steps")
    return f"{steps} steps per run, 1 vs 2 passes per step"


def check_parameter_accounting() -> str:
    config = toy_config()
    backbone = EncoderParams.initialize(config.encoder, seed=0, frozen=True)
    enc = config.encoder
    d, classes = enc.embed_dim, config.data.continual_classes
    backbone_count = backbone.parameter_count()
    head = classes * d + classes
    cases = {
        "iprompt": (config, 4 * (2 * 1 + 1) * d * len(enc.prompted_layers) + head + 4),
        "zero-prompt": (toy_config(prompt={"pool_size": 0, "prompt_length": 1}), head),
        "finetune": (toy_config(prompt={"method": "finetune"}), backbone_count + head),
    }

    for name, (case, expected) in cases.items():
        learnable, total, ratio = param_ratio(build_learner(backbone, case, num_tasks=4))
        expected_total = backbone_count + expected if name != "finetune" else expected
        if learnable != expected or total != expected_total or ratio != expected / expected_total:
            raise VerificationError(f"{name}: counted {learnable}/{total}, expected {expected}/{expected_total}")
    return "finetune, iprompt and zero-prompt counts match closed forms"


def check_dataset_determinism() -> str:
    spec = SyntheticSpec(num_classes=8, per_class_count=3, image_size=8, rng_seed=4)
    a, b = generate(spec), generate(spec)
    if a.images.tobytes() != b.images.tobytes() or len(a) != 24:
        raise VerificationError("synthetic generator is not deterministic")
    return "generator bit-stable"


CHECKS: dict[str, Callable[[], str]] = {
    "gradients": check_gradients,
    "matching_oracles": check_matching_oracles,
    "encoder_invariants": check_encoder_invariants,
    "metric_identities": check_metric_identities,
    "parameter_accounting": check_parameter_accounting,
    "dataset_determinism": check_dataset_determinism,
    "continual_contracts": check_continual_contracts,
}


def run_checks(names: list[str] | None = None) -> list[CheckResult]:
    """
    Run the selected checks (all by default).

    Raises:
        UsageError: If a name is not a known check.
        VerificationError: If any check fails; the message lists every failure.
    """
    selected = names or list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise UsageError(f"unknown check(s) {', '.join(unknown)}; choose from {', '.join(CHECKS)}")
    results = []
    for name in selected:
        started = time.perf_counter()
        try:
            detail, passed = CHECKS[name](), True
        except (IPromptLabError, AssertionError) as exc:
            detail, passed = str(exc), False
        elapsed = time.perf_counter() - started
        results.append(CheckResult(name, passed, detail, elapsed))
        log = logger.info if passed else logger.error
        log(
            "Check %s %s: %s",
            name,
            "passed" if passed else "FAILED",
            detail,
            extra={"seconds": math.floor(elapsed * 1000) / 1000},
        )
    failures = [r for r in results if not r.passed]
    if failures:
        raise VerificationError("; ".join(f"{r.name}: {r.detail}" for r in failures))
    return results
