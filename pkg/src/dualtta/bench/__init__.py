"""Experiment orchestration, metrics, significance testing and reports."""

from .experiment import (CSV_COLUMNS, ExperimentConfig, ExperimentResult, PretrainConfig,
                         compare_methods, csv_text, emit_reports, run_experiment, run_stream, score)
from .metrics import macro_f1, metrics, per_group_accuracy
from .stats import wilcoxon_signed_rank

__all__ = [
    "CSV_COLUMNS", "ExperimentConfig", "ExperimentResult", "PretrainConfig", "compare_methods",
    "csv_text", "emit_reports", "run_experiment", "run_stream", "score", "macro_f1", "metrics",
    "per_group_accuracy", "wilcoxon_signed_rank",
]
