"""Deterministic simulation of co-evolving Society/Environment machine networks."""

from coevo.core import (
    AgentSpec,
    FunctionRule,
    KernelRule,
    LinearRingRule,
    MachineSpec,
    MessageGraph,
    RingCoeffs,
    TableRule,
    ValidationReport,
    apply_ledger_message,
    apply_resource_transfer,
    step_machine,
    validate_agent,
)

__version__ = "0.1.0"

__all__ = [
    "AgentSpec",
    "FunctionRule",
    "KernelRule",
    "LinearRingRule",
    "MachineSpec",
    "MessageGraph",
    "RingCoeffs",
    "TableRule",
    "ValidationReport",
    "apply_ledger_message",
    "apply_resource_transfer",
    "step_machine",
    "validate_agent",
]
