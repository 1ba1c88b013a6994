"""Branching Brownian motion among Poissonian traps: simulation, estimators and asymptotic constants."""

__version__ = "0.1.0"

from .bbm import ConfigError, CouplingViolation, SimConfig, run_coupled, run_deactivated, run_replicate
from .env import Environment, EnvironmentSpec, KillingFunction, empty_environment, restore, snapshot
from .theory import ModelConstants, derived_constants, principal_eigenvalue

__all__ = [
    "ConfigError",
    "CouplingViolation",
    "Environment",
    "EnvironmentSpec",
    "KillingFunction",
    "ModelConstants",
    "SimConfig",
    "derived_constants",
    "empty_environment",
    "principal_eigenvalue",
    "restore",
    "run_coupled",
    "run_deactivated",
    "run_replicate",
    "snapshot",
]
