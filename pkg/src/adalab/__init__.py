"""Simulation lab for the adaptive data analysis query game."""

from adalab.adversaries import AdversaryConfig
from adalab.core import GameHistory, GaussianWorldState, QuerySpec, extend_world
from adalab.harness import ExperimentConfig, RiskReport, estimate_risk, run_game, sweep
from adalab.mechanisms import MechanismConfig, NoiseSpec, default_schedule

__all__ = [
    "AdversaryConfig", "ExperimentConfig", "GameHistory", "GaussianWorldState",
    "MechanismConfig", "NoiseSpec", "QuerySpec", "RiskReport", "default_schedule",
    "estimate_risk", "extend_world", "run_game", "sweep",
]
