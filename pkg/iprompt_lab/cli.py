"""
Command-line interface: ``iprompt-lab <command> [options]``.

Commands:
    gen       generate the synthetic pretrain/train/test datasets
    pretrain  pretrain and freeze the backbone on the pretrain classes
    run       one continual run; writes tasks.jsonl, summary.csv, prompts.ipvt
    compare   several runs (configs x methods x seeds) into compare.csv
    sweep     pool size x prompt length grid into sweep.csv
    verify    the self-verification suite

Exit codes: 0 success, 1 experiment or verification failure, 2 usage or
configuration error.
"""

import argparse
import logging
import sys
from collections.abc import Mapping, Sequence
from pathlib import Path
from typing import Any

from iprompt_lab import __version__, metrics
from iprompt_lab.config import ExperimentConfig, load_config
from iprompt_lab.data import DATASET_FILES, Dataset, Split, build_datasets, load_datasets, save_dataset
from iprompt_lab.encoder import EncoderParams
from iprompt_lab.exceptions import IPromptLabError, UsageError
from iprompt_lab.harness import pretrain_backbone, run_experiment
from iprompt_lab.models import RunReport
from iprompt_lab.reporting import (
    SUMMARY_COLUMNS,
    SWEEP_COLUMNS,
    render_csv,
    render_table,
    resolve_output_dir,
    summary_row,
    sweep_row,
    write_run_report,
    write_text,
)
from iprompt_lab.snapshot import SnapshotKind, encode_snapshot, load_encoder, save_encoder, write_snapshot
from iprompt_lab.verify import run_checks

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


# ---------------------------------------------------------------------------
# Config helpers
# ---------------------------------------------------------------------------


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    return {"seed": args.seed} if args.seed is not None else {}


def resolve_config(path: Path | None, args: argparse.Namespace) -> ExperimentConfig:
    if path is not None:
        return load_config(path, _overrides(args))
    return ExperimentConfig(**_overrides(args))


def with_updates(config: ExperimentConfig, **updates: Any) -> ExperimentConfig:
    values = config.model_dump()
    for key, value in updates.items():
        if isinstance(value, dict):
            values[key] = {**values[key], **value}
        else:
            values[key] = value
    return ExperimentConfig(**values)


def _configure_logging(verbose: bool, config: ExperimentConfig | None = None) -> None:
    debug = verbose or (config is not None and config.debug)
    logging.basicConfig(level=logging.DEBUG if debug else logging.INFO, format=LOG_FORMAT, force=True)
    if config is not None:
        metrics.enable(config.metrics_enabled)


class _Backbones:
    """Loads each backbone snapshot once per process."""

    def __init__(self) -> None:
        self._cache: dict[Path, EncoderParams] = {}

    def get(self, config: ExperimentConfig) -> EncoderParams:
        path = config.paths.backbone
        if path not in self._cache:
            self._cache[path] = load_encoder(path)
        params = self._cache[path]
        if params.config != config.encoder:
            raise UsageError(f"backbone {path} was built for a different encoder shape")
        return params


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args)
    _configure_logging(args.verbose, config)
    out = args.out or config.paths.dataset_dir
    for split, dataset in build_datasets(config).items():
        save_dataset(out / DATASET_FILES[split], dataset)
    print(f"wrote datasets to {out}")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args)
    _configure_logging(args.verbose, config)
    datasets = load_datasets(config.paths.dataset_dir)
    result = pretrain_backbone(datasets["pretrain"], config)
    target = args.out / "backbone.ipvt" if args.out else config.paths.backbone
    save_encoder(target, result.params)
    print(f"pretrained backbone: holdout accuracy {result.holdout_accuracy:.4f} -> {target}")
    return 0


def _run_one(
    config: ExperimentConfig, backbones: _Backbones, datasets: Mapping[Split, Dataset] | None = None
) -> RunReport:
    datasets = datasets or load_datasets(config.paths.dataset_dir)
    report, _ = run_experiment(config, datasets, backbones.get(config))
    return report


def cmd_run(args: argparse.Namespace) -> int:
    config = resolve_config(args.config, args)
    _configure_logging(args.verbose, config)
    datasets = load_datasets(config.paths.dataset_dir)
    backbones = _Backbones()
    report, learner = run_experiment(config, datasets, backbones.get(config))
    directory = resolve_output_dir(args.out or config.paths.report_dir, config.name, args.overwrite)
    write_run_report(directory, report)
    if learner.prompt_tensors():
        blob = encode_snapshot(
            SnapshotKind.PROMPTS,
            {"method": report.method, "prompt": config.prompt.model_dump(mode="json")},
            learner.prompt_tensors(),
            learner.chunk_table(),
        )
        write_snapshot(directory / "prompts.ipvt", blob)
    print(f"{report.method} {report.scenario}: avg_acc {report.avg_acc:.4f} last_acc {report.last_acc:.4f}")
    print(f"reports in {directory}")
    return 0


def _expand(args: argparse.Namespace, paths: Sequence[Path | None]) -> list[ExperimentConfig]:
    configs = []
    for path in paths:
        base = resolve_config(path, args)
        methods = args.methods or [base.prompt.method]
        seeds = args.seeds or [base.seed]
        for method in methods:
            for seed in seeds:
                configs.append(with_updates(base, seed=seed, prompt={"method": method}))
    return configs


def cmd_compare(args: argparse.Namespace) -> int:
    paths: list[Path | None] = list(args.configs) or [args.config]
    configs = _expand(args, paths)
    _configure_logging(args.verbose, configs[0])
    backbones = _Backbones()
    cache: dict[Path, dict[Split, Dataset]] = {}
    reports = []
    for config in configs:
        directory = config.paths.dataset_dir
        if directory not in cache:
            cache[directory] = load_datasets(directory)
        reports.append(_run_one(config, backbones, cache[directory]))
    out = args.out or configs[0].paths.report_dir
    write_text(out / "compare.csv", render_csv([summary_row(r) for r in reports], SUMMARY_COLUMNS))
    sys.stdout.write(render_table(reports))
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    base = resolve_config(args.config, args)
    _configure_logging(args.verbose, base)
    datasets = load_datasets(base.paths.dataset_dir)
    backbones = _Backbones()
    rows = []
    for pool_size in args.pool_sizes:
        for length in args.prompt_lengths:
            for seed in args.seeds or [base.seed]:
                config = with_updates(base, seed=seed, prompt={"pool_size": pool_size, "prompt_length": length})
                rows.append(sweep_row(_run_one(config, backbones, datasets), pool_size, length))
    out = args.out or base.paths.report_dir
    write_text(out / "sweep.csv", render_csv(rows, SWEEP_COLUMNS))
    print(f"wrote {len(rows)} sweep cells to {out / 'sweep.csv'}")
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    _configure_logging(args.verbose)
    results = run_checks(args.checks or None)
    for result in results:
        print(f"ok   {result.name:<22} {result.detail}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="experiment config file")
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--out", type=Path, default=None, help="output directory")
    common.add_argument("--overwrite", action="store_true", help="replace existing reports")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="iprompt-lab", description="Prompt-based continual learning lab")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[common], help="generate datasets").set_defaults(func=cmd_gen)
    sub.add_parser("pretrain", parents=[common], help="pretrain the backbone").set_defaults(func=cmd_pretrain)
    sub.add_parser("run", parents=[common], help="one continual run").set_defaults(func=cmd_run)

    compare = sub.add_parser("compare", parents=[common], help="compare runs")
    compare.add_argument("configs", nargs="*", type=Path, help="config files (default: --config)")
    compare.add_argument("--methods", nargs="+", default=None, help="methods to run for every config")
    compare.add_argument("--seeds", nargs="+", type=int, default=None, help="seeds to run for every config")
    compare.set_defaults(func=cmd_compare)

    sweep = sub.add_parser("sweep", parents=[common], help="pool size x prompt length grid")
    sweep.add_argument("--pool-sizes", nargs="+", type=int, default=[4, 8, 20, 40])
    sweep.add_argument("--prompt-lengths", nargs="+", type=int, default=[1, 2, 4])
    sweep.add_argument("--seeds", nargs="+", type=int, default=None)
    sweep.set_defaults(func=cmd_sweep)

    verify = sub.add_parser("verify", parents=[common], help="run the verification suite")
    verify.add_argument("--check", dest="checks", action="append", default=None, help="run only this check")
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args))
    except IPromptLabError as exc:
        print(f"error: {exc.message}", file=sys.stderr)
        return exc.exit_code
