"""Deterministic clustered federated learning simulator.

Trains an ensemble of small classifiers over synthetic federated scenarios
containing simultaneous label, feature, and concept distribution shifts, with
responsibility-weighted soft clustering, contrast baselines, adaptive cluster
removal, and ground-truth cluster-quality reporting.
"""
from .engine import AssignmentState, LabelStats, RCHyper
from .errors import ConfigurationError, FedshiftError, NumericError, ParseError
from .federation import ClusterEnsemble, FedConfig
from .models import ModelSpec
from .runner import ExperimentResult, run_experiment
from .scenario import FederatedScenario, ScenarioConfig, generate, load_scenario, save_scenario

__version__ = "0.1.0"

__all__ = [
    "AssignmentState",
    "ClusterEnsemble",
    "ConfigurationError",
    "ExperimentResult",
    "FedConfig",
    "FederatedScenario",
    "FedshiftError",
    "LabelStats",
    "ModelSpec",
    "NumericError",
    "ParseError",
    "RCHyper",
    "ScenarioConfig",
    "generate",
    "load_scenario",
    "run_experiment",
    "save_scenario",
    "__version__",
]
