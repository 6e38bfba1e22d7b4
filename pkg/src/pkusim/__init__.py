"""Deterministic simulator and policy library for PKU-based sandboxing."""

from .machine import (
    Access,
    Mapping,
    PAGE_SIZE,
    Perms,
    Route,
    Share,
    SimState,
    pkru_allows,
    pkru_locked_value,
)
from .policy import PolicyKind, make_policy
from .scanner import SafePattern, UnsafeKind, UnsafeOccurrence, scan_bytes, scan_boundary
from .scenario import Expectation, Outcome, Scenario, run_scenario

__version__ = "0.1.0"

__all__ = [
    "Access",
    "Expectation",
    "Mapping",
    "Outcome",
    "PAGE_SIZE",
    "Perms",
    "PolicyKind",
    "Route",
    "SafePattern",
    "Scenario",
    "Share",
    "SimState",
    "UnsafeKind",
    "UnsafeOccurrence",
    "make_policy",
    "pkru_allows",
    "pkru_locked_value",
    "run_scenario",
    "scan_boundary",
    "scan_bytes",
]
