"""Configuration, checkpoints, pipeline orchestration, reports and the CLI."""
from .checkpoint import CheckpointError, inspect_checkpoint, load_checkpoint, save_checkpoint
from .config import AnalysisConfig, DatasetConfig, RunConfig, SCMParams
from .pipeline import AnalysisResult, Comparison, analyze, build_dataset, compare_runs
from .report import ReportBundle, emit_report, tables_from_metrics, validate_metrics

__all__ = [
    "AnalysisConfig", "AnalysisResult", "CheckpointError", "Comparison", "DatasetConfig",
    "ReportBundle", "RunConfig", "SCMParams", "analyze", "build_dataset", "compare_runs",
    "emit_report", "inspect_checkpoint", "load_checkpoint", "save_checkpoint",
    "tables_from_metrics", "validate_metrics",
]
