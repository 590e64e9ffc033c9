"""Desk-scale simulator for model poisoning attacks on federated learning."""

from .simulator import ConfigError, RunResult, SimConfig, run

__all__ = ["ConfigError", "RunResult", "SimConfig", "run"]
__version__ = "0.1.0"
