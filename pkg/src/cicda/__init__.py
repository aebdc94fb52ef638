"""Conditionally invariant components for domain adaptation on linear SCMs."""
from .algorithms import METHODS, MethodSpec, TrainedRun, deviation_diagnostic, train_method
from .detection import DetectionReport, restrict_region, restricted_bound, target_risk_lower_bound
from .harness import ResultTable, SuiteConfig, emit_table, run_detection_experiment, run_suite
from .label_shift import ConfusionMatrix, confusion_matrix, estimate_weights
from .model import LinearModel
from .penalties import PenaltySpec, cip_penalty, dip_penalty, joint_dip_penalty, mmd_penalty
from .scm import Dataset, ScenarioSpec, build_scenario, generate_scenario_data, scenario_for_seed

__all__ = [
    "METHODS", "MethodSpec", "TrainedRun", "deviation_diagnostic", "train_method",
    "DetectionReport", "restrict_region", "restricted_bound", "target_risk_lower_bound",
    "ResultTable", "SuiteConfig", "emit_table", "run_detection_experiment", "run_suite",
    "ConfusionMatrix", "confusion_matrix", "estimate_weights", "LinearModel",
    "PenaltySpec", "cip_penalty", "dip_penalty", "joint_dip_penalty", "mmd_penalty",
    "Dataset", "ScenarioSpec", "build_scenario", "generate_scenario_data", "scenario_for_seed",
]
__version__ = "0.1.0"
