"""Dataset inference against model stealing, at desk scale.

The subpackages mirror the pipeline: :mod:`~dsinfer.theory` (linear
model results), :mod:`~dsinfer.models` (numpy MLPs), :mod:`~dsinfer.stealing`
(threat models), :mod:`~dsinfer.embeddings` (Blind Walk and MinGD),
:mod:`~dsinfer.inference` (regressor and hypothesis test),
:mod:`~dsinfer.oracle_net` (network label oracle) and :mod:`~dsinfer.cli`.
"""

from .embeddings import EmbeddingConfig, embed_dataset
from .experiments import ExperimentConfig, ScenarioConfig, build_scenario
from .inference import (DIPools, Regressor, RegressorConfig, Verdict, harmonic_mean_p,
                        run_dataset_inference, train_regressor, welch_one_sided)
from .models import ArchSpec, LabeledSet, Model, TrainConfig, init_model, train_sgd
from .oracle_net import connect_oracle, serve_model
from .oracles import BudgetExhausted, GradientOracle, LocalOracle, OracleError
from .stealing import ThreatModel, run_attack
from .theory import TheoryParams, monte_carlo_verify

__version__ = "0.1.0"

__all__ = [
    "ArchSpec", "BudgetExhausted", "DIPools", "EmbeddingConfig", "ExperimentConfig", "GradientOracle",
    "LabeledSet", "LocalOracle", "Model", "OracleError", "Regressor", "RegressorConfig",
    "ScenarioConfig", "TheoryParams", "ThreatModel", "TrainConfig", "Verdict", "build_scenario",
    "connect_oracle", "embed_dataset", "harmonic_mean_p", "init_model", "monte_carlo_verify",
    "run_attack", "run_dataset_inference", "serve_model", "train_regressor", "train_sgd",
    "welch_one_sided",
]
