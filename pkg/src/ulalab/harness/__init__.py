"""Experiment orchestration: configs, pipeline, search, ablations and reports."""
from .ablation import AblationResult, ablation_suite
from .config import (DEFAULT_SPACE, ExperimentConfig, TaskSpec, TrialConfig, load_config,
                     parse_config, task_spec, trial_config)
from .pipeline import TrialResult, out_root, run_pipeline
from .report import report, summarize
from .search import SearchFailed, SearchResult, draw_configs, run_search, select_winner

__all__ = [
    "AblationResult", "DEFAULT_SPACE", "ExperimentConfig", "SearchFailed", "SearchResult",
    "TaskSpec", "TrialConfig", "TrialResult", "ablation_suite", "draw_configs", "load_config",
    "out_root", "parse_config", "report", "run_pipeline", "run_search", "select_winner",
    "summarize", "task_spec", "trial_config",
]
