"""
Experiment front end. Parses a JSON experiment config, trains one run per
seed (or one per seed and arm for a comparison suite) and writes the metric,
reliability, summary and comparison tables.

    python experiment_manager.py run experiment.json [--dry-run] [--out DIR] [--seed-override 1,2,3]
    python experiment_manager.py suite experiment.json --arms baseline random-mixup calibratemix
"""
import os
import sys
import json
import logging
import argparse
from multiprocessing import Pool
from typing import Any, Dict, List

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from calibration import write_reliability_csv
from data_manager import DataManager, DatasetConfig
from trainer import METRIC_HEADERS, AugmentationSpec, TrainerConfig, train_run
from utils import (
    LOG_FILENAME, CalibrateMixError, ConfigError, TrainingAbortedError, atomic_write_csv, format_sig,
    setup_logging,
)

ENV_OUTPUT_DIR = "CALIBRATEMIX_OUTPUT_DIR"
EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2

SUMMARY_HEADERS = ["metric", "mean", "std", "runs"]
COMPARISON_HEADERS = ["arm", "metric", "mean", "std", "runs", "status", "split_hash"]
SUMMARY_METRICS = ("test_ece", "test_error")
_PATH_KEYS = ("path", "labels_path", "test_path", "test_labels_path")

# Arm name -> trainer overrides. Arms differ only in these mode flags.
ARM_PRESETS = {
    "baseline": {"mixup_mode": "none", "label_smoothing": False},
    "supervised": {"mixup_mode": "none", "label_smoothing": False, "lambda_u": 0.0},
    "calibratemix": {"mixup_mode": "calibratemix", "label_smoothing": False},
    "random-mixup": {"mixup_mode": "random-mixup", "label_smoothing": False},
    "label-smoothing": {"mixup_mode": "none", "label_smoothing": True},
    "calibratemix+ls": {"mixup_mode": "calibratemix", "label_smoothing": True},
    "mixup-all": {"mixup_mode": "calibratemix", "pairing": {"mixup_all": True}},
    "mixup-all-nowarmup": {"mixup_mode": "calibratemix", "use_warmup": False, "pairing": {"mixup_all": True}},
    "calibratemix-nowarmup": {"mixup_mode": "calibratemix", "use_warmup": False},
    "calibratemix-k0": {"mixup_mode": "calibratemix", "pairing": {"k": 0}},
    "calibratemix-k5": {"mixup_mode": "calibratemix", "pairing": {"k": 5}},
    "calibratemix-k10": {"mixup_mode": "calibratemix", "pairing": {"k": 10}},
    "calibratemix-k15": {"mixup_mode": "calibratemix", "pairing": {"k": 15}},
}


class ModelConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    hidden: List[int] = Field(default_factory=lambda: [64, 64])

    @field_validator("hidden")
    @classmethod
    def _positive_widths(cls, widths):
        if any(w < 1 for w in widths):
            raise ValueError("hidden layer widths must be >= 1")
        return widths


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_bins: int = Field(15, ge=1)
    log_every: int = Field(100, ge=1)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str = "experiment"
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    augmentation: AugmentationSpec = Field(default_factory=AugmentationSpec)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "results"
    arms: Dict[str, Dict[str, Any]] = Field(default_factory=dict) # extra named arms: trainer overrides
    suite_arms: List[str] = Field(default_factory=lambda: ["baseline", "random-mixup", "label-smoothing", "calibratemix"])

    @field_validator("seeds")
    @classmethod
    def _non_negative_seeds(cls, seeds):
        if any(s < 0 for s in seeds):
            raise ValueError("seeds must be >= 0")
        return seeds


# --- Configuration ---
def _format_validation_error(error):
    parts = []
    for err in error.errors():
        location = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{location}: {err['msg']}")
    return "; ".join(parts)


def parse_config(path):
    """
    Read and validate an experiment config. Relative dataset file paths are
    resolved against the config file's directory.
    Raises: ConfigError naming the file and the offending key, line or column.
    """
    try:
        with open(path, encoding="utf-8") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config '{path}': {e}") from e
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object.")

    dataset = raw.get("dataset")
    if isinstance(dataset, dict):
        base = os.path.dirname(os.path.abspath(path))
        for key in _PATH_KEYS:
            value = dataset.get(key)
            if isinstance(value, str) and value and not os.path.isabs(value):
                dataset[key] = os.path.join(base, value)
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"{path}: {_format_validation_error(e)}") from e
    for arm in cfg.arms:
        trainer_for_arm(cfg, arm)
    return cfg


def _merge(base, overrides):
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def trainer_for_arm(cfg, arm):
    """TrainerConfig of ``cfg`` with the arm's overrides applied (config-defined arms win over presets)."""
    if arm in cfg.arms:
        overrides = cfg.arms[arm]
    elif arm in ARM_PRESETS:
        overrides = ARM_PRESETS[arm]
    else:
        known = sorted(set(ARM_PRESETS) | set(cfg.arms))
        raise ConfigError(f"Unknown arm '{arm}'. Known arms: {', '.join(known)}.")
    try:
        return TrainerConfig.model_validate(_merge(cfg.trainer.model_dump(), overrides))
    except ValidationError as e:
        raise ConfigError(f"arm '{arm}': {_format_validation_error(e)}") from e


def resolve_output_dir(cfg, cli_out=None):
    """--out beats the environment variable, which beats the config value."""
    return cli_out or os.environ.get(ENV_OUTPUT_DIR) or cfg.output_dir


def resolved_dump(cfg, arms=None):
    data = cfg.model_dump()
    data["trainer"] = cfg.trainer.resolved()
    if arms:
        data["resolved_arms"] = {arm: trainer_for_arm(cfg, arm).resolved() for arm in arms}
    return data


# --- Running ---
def _run_job(job):
    """Train one seed and write its files. Runs in a worker process when --workers > 1."""
    cfg, trainer_cfg, data, seed, out_dir = job
    outcome = {"seed": seed, "status": "ok", "message": ""}
    metrics_path = os.path.join(out_dir, f"metrics_seed{seed}.csv")
    try:
        result = train_run(trainer_cfg, cfg.augmentation, data, seed, hidden=cfg.model.hidden,
                           log_every=cfg.evaluation.log_every, num_bins=cfg.evaluation.num_bins,
                           dump_dir=out_dir, checkpoint_path=os.path.join(out_dir, f"checkpoint_seed{seed}.npz"))
    except TrainingAbortedError as e:
        atomic_write_csv(metrics_path, METRIC_HEADERS, e.history)
        logging.error(f"Seed {seed} aborted: {e} (dump: {e.dump_path})")
        outcome.update(status="aborted", message=str(e))
        return outcome
    except CalibrateMixError as e:
        logging.error(f"Seed {seed} failed: {e}", exc_info=True)
        outcome.update(status="failed", message=str(e))
        return outcome

    atomic_write_csv(metrics_path, METRIC_HEADERS, result.history)
    if result.report is not None:
        write_reliability_csv(os.path.join(out_dir, f"reliability_seed{seed}.csv"), result.report.bins)
        outcome.update(test_ece=result.report.ece, test_error=result.report.error_rate, test_mce=result.report.mce)
    outcome["counters"] = result.counters
    return outcome


def _execute(jobs, workers):
    """Run jobs in order, in a process pool when workers > 1. Results keep job order."""
    if workers <= 1 or len(jobs) <= 1:
        return [_run_job(job) for job in jobs]
    with Pool(processes=min(workers, len(jobs))) as pool:
        return pool.map(_run_job, jobs)


def summarize(outcomes):
    """
    Mean and standard deviation (ddof=1; 0 for a single run) of each final
    test metric over the successful seeds. Values are rounded as the per-seed
    CSVs store them, so the summary is recomputable from those files.
    """
    rows = []
    for metric in SUMMARY_METRICS:
        values = np.array([float(format_sig(o[metric])) for o in outcomes if o["status"] == "ok" and metric in o],
                          dtype=np.float64)
        if values.size == 0:
            rows.append({"metric": metric, "mean": None, "std": None, "runs": 0})
            continue
        std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
        rows.append({"metric": metric, "mean": float(np.mean(values)), "std": std, "runs": int(values.size)})
    return rows


def _prepare(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    return DataManager(cfg.dataset).build()


def run_experiment(cfg, out_dir, workers=1, trainer_cfg=None, data=None):
    """
    Train every seed, write per-seed metric/reliability/checkpoint files and summary.csv.
    Returns: exit status (0 when every seed completed).
    """
    trainer_cfg = trainer_cfg or cfg.trainer
    data = data if data is not None else _prepare(cfg, out_dir)
    os.makedirs(out_dir, exist_ok=True)
    logging.info(f"Running '{cfg.name}' with seeds {cfg.seeds} into {out_dir}")
    outcomes = _execute([(cfg, trainer_cfg, data, seed, out_dir) for seed in cfg.seeds], workers)
    atomic_write_csv(os.path.join(out_dir, "summary.csv"), SUMMARY_HEADERS, summarize(outcomes))
    failed = [o["seed"] for o in outcomes if o["status"] != "ok"]
    if failed:
        logging.error(f"Seeds {failed} did not complete.")
        return EXIT_FAILED
    return EXIT_OK


def run_suite(cfg, arms, out_dir, workers=1):
    """
    Run every arm on the same split and seeds; each arm writes into its own
    subdirectory and comparison.csv gets one row per (arm, metric).
    A failed arm is marked and the remaining arms still run.
    Returns: exit status (0 when every arm completed).
    """
    if len(arms) < 2:
        raise ConfigError(f"A suite needs at least two arms, got {list(arms)}.")
    trainer_cfgs = {arm: trainer_for_arm(cfg, arm) for arm in arms}
    data = _prepare(cfg, out_dir)
    split_hash = data.fingerprint()
    logging.info(f"Suite '{cfg.name}': arms {list(arms)} x seeds {cfg.seeds}, split {split_hash[:12]}")

    jobs, owners = [], []
    for arm in arms:
        arm_dir = os.path.join(out_dir, arm)
        os.makedirs(arm_dir, exist_ok=True)
        for seed in cfg.seeds:
            jobs.append((cfg, trainer_cfgs[arm], data, seed, arm_dir))
            owners.append(arm)
    outcomes = _execute(jobs, workers)

    rows, status = [], EXIT_OK
    for arm in arms:
        arm_outcomes = [o for o, owner in zip(outcomes, owners) if owner == arm]
        summary = summarize(arm_outcomes)
        atomic_write_csv(os.path.join(out_dir, arm, "summary.csv"), SUMMARY_HEADERS, summary)
        completed = sum(o["status"] == "ok" for o in arm_outcomes)
        if completed == len(arm_outcomes):
            arm_status = "ok"
        else:
            arm_status = "failed" if completed == 0 else "partial"
            status = EXIT_FAILED
            logging.error(f"Arm '{arm}': {len(arm_outcomes) - completed} of {len(arm_outcomes)} seeds failed.")
        for row in summary:
            rows.append({"arm": arm, **row, "status": arm_status, "split_hash": split_hash})
    atomic_write_csv(os.path.join(out_dir, "comparison.csv"), COMPARISON_HEADERS, rows)
    return status


# --- CLI ---
def _parse_seeds(text):
    try:
        seeds = [int(part) for part in text.replace(" ", "").split(",") if part]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list '{text}'") from None
    if not seeds or any(s < 0 for s in seeds):
        raise argparse.ArgumentTypeError(f"seed list must hold non-negative integers, got '{text}'")
    return seeds


def build_parser():
    parser = argparse.ArgumentParser(description="Semi-supervised calibration experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (("run", "Train every seed of one configuration"),
                            ("suite", "Compare arms on identical splits and seeds")):
        cmd = sub.add_parser(name, help=help_text)
        cmd.add_argument("config", help="Path to the JSON experiment config")
        cmd.add_argument("--dry-run", action="store_true", help="Validate and print the resolved config, then exit")
        cmd.add_argument("--out", help=f"Output directory (overrides ${ENV_OUTPUT_DIR} and the config)")
        cmd.add_argument("--seed-override", type=_parse_seeds, help="Comma-separated seeds replacing the config list")
        cmd.add_argument("--workers", type=int, default=1, help="Worker processes for seeds/arms")
        cmd.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
        if name == "suite":
            cmd.add_argument("--arms", nargs="+", help="Arm names (presets or config-defined)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    setup_logging(level=level)
    try:
        cfg = parse_config(args.config)
        if args.seed_override:
            cfg = cfg.model_copy(update={"seeds": args.seed_override})
        arms = None
        if args.command == "suite":
            arms = args.arms or cfg.suite_arms
            for arm in arms:
                trainer_for_arm(cfg, arm)
        if args.dry_run:
            print(json.dumps(resolved_dump(cfg, arms), indent=2, sort_keys=True))
            return EXIT_OK

        out_dir = resolve_output_dir(cfg, args.out)
        os.makedirs(out_dir, exist_ok=True)
        setup_logging(os.path.join(out_dir, LOG_FILENAME), level=level)
        if args.command == "suite":
            return run_suite(cfg, arms, out_dir, workers=args.workers)
        return run_experiment(cfg, out_dir, workers=args.workers)
    except ConfigError as e:
        logging.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except CalibrateMixError as e:
        logging.error(f"Run failed: {e}", exc_info=True)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
