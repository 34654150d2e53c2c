"""Tick-accurate simulator and verification harness for a VDF-paced
consensus protocol, its peek extension, and its benign asynchronous parent
model, with mappings that translate adversarial runs into benign ones.
"""

from .engine import (
    CorrectNodeSpec,
    Environment,
    Event,
    IllegalStrategyAction,
    Trace,
    message_history,
    run,
    run_smplus,
    validate_environment,
)
from .messages import (
    GorillaMessage,
    MessageStore,
    SandglassMessage,
    VALUES,
    coin_value,
)
from .oracle import Oracle, VdfInput

__all__ = [
    "CorrectNodeSpec",
    "Environment",
    "Event",
    "GorillaMessage",
    "IllegalStrategyAction",
    "MessageStore",
    "Oracle",
    "SandglassMessage",
    "Trace",
    "VALUES",
    "VdfInput",
    "coin_value",
    "message_history",
    "run",
    "run_smplus",
    "validate_environment",
]

__version__ = "0.1.0"
