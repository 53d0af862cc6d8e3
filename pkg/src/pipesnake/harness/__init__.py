from .config import ExperimentConfig, config_hash, parse_config, serialize_config
from .experiment import EvalReport, evaluate, run_experiment

__all__ = [
    "ExperimentConfig", "config_hash", "parse_config", "serialize_config",
    "EvalReport", "evaluate", "run_experiment",
]
