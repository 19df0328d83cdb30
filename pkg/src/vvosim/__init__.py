"""Volt/VAR optimization co-simulation with a DNP3 control channel under attack."""

from ._kernels import BACKEND
from .attack import DosAttack, ModpAttack, Transform, apply_modp
from .cosim import ScenarioConfig, Simulation, load_config, run_scenario
from .feeder import FeederModel, build_ieee34_modified, load_feeder, save_feeder
from .powerflow import OperatingPoint, PowerFlowSolution, solve
from .report import ScenarioReport, compare_to, summarize
from .vvo import MeasurementSet, PriceBook, VvoSetpoints, cvr_factor, solve_vvo

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "DosAttack",
    "FeederModel",
    "MeasurementSet",
    "ModpAttack",
    "OperatingPoint",
    "PowerFlowSolution",
    "PriceBook",
    "ScenarioConfig",
    "ScenarioReport",
    "Simulation",
    "Transform",
    "VvoSetpoints",
    "apply_modp",
    "build_ieee34_modified",
    "compare_to",
    "cvr_factor",
    "load_config",
    "load_feeder",
    "run_scenario",
    "save_feeder",
    "solve",
    "solve_vvo",
    "summarize",
]
