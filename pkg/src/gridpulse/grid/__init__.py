"""Static network model: data file, admittances, power flow, faults, reduction."""

from .model import Branch, Bus, Generator, GridError, GridModel, ieee39, load, loads, dumps
from .network import (
    BOLTED_ADMITTANCE,
    FaultScenario,
    FaultType,
    ReducedNetwork,
    augmented_ybus,
    build_ybus,
    fault_shunt,
    kron_reduce,
    shunt_admittance,
    stage_admittances,
    stage_networks,
)
from .powerflow import OperatingPoint, PowerFlowError, bus_mismatch, solve_power_flow

__all__ = [
    "BOLTED_ADMITTANCE", "Branch", "Bus", "FaultScenario", "FaultType", "Generator",
    "GridError", "GridModel", "OperatingPoint", "PowerFlowError", "ReducedNetwork",
    "augmented_ybus", "build_ybus", "bus_mismatch", "dumps", "fault_shunt", "ieee39",
    "kron_reduce", "load", "loads", "shunt_admittance", "solve_power_flow",
    "stage_admittances", "stage_networks",
]
