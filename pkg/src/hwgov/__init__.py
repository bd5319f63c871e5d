"""Governance layer for coding agents: hard rules, a learned approval policy, and persistent memory."""

from __future__ import annotations

from .core import (
    ActionKind,
    ActionProposal,
    ChangeCategory,
    Decision,
    FeatureVector,
    Initiator,
    Phase,
    Route,
    Verdict,
)
from .policy import PolicyState, score, sgd_update, warm_start

__version__ = "0.1.0"

__all__ = [
    "ActionKind",
    "ActionProposal",
    "ChangeCategory",
    "Decision",
    "FeatureVector",
    "Initiator",
    "Phase",
    "PolicyState",
    "Route",
    "Verdict",
    "score",
    "sgd_update",
    "warm_start",
]
