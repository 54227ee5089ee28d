"""Config-driven orchestration: data, training, evaluation, sweeps and reports."""

from invarlab.experiments.config import (
    DatasetSpec,
    EvalSpec,
    ExperimentConfig,
    ModelSpec,
    bundled_config,
    load_config,
)
from invarlab.experiments.report import ReportBundle, report
from invarlab.experiments.runner import RunRecord, dry_run, run_experiment, sweep_objects

__all__ = [
    "DatasetSpec", "EvalSpec", "ExperimentConfig", "ModelSpec", "load_config", "bundled_config",
    "RunRecord", "run_experiment", "sweep_objects", "dry_run", "report", "ReportBundle",
]
