from .config import ExperimentConfig
from .experiments import EXPERIMENT_RUNNERS, RunSummary, emit_outputs, run_experiment

__all__ = ["ExperimentConfig", "RunSummary", "EXPERIMENT_RUNNERS",
           "run_experiment", "emit_outputs"]
