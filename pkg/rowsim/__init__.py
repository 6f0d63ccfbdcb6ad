"""
Rowsim Package
Simulated DRAM, MMU and kernel with software and in-DRAM target row
refresh, page-table hammering attacks and a mapping probe.
"""

__version__ = "1.0.0"
__author__ = "Row Refresh Simulator Team"

from .errors import (SimulationError, AddressError, ContractError, PlacementError, SegmentationError,
                     OutOfMemoryError, ConfigError, ScenarioError, InvariantViolation, MetricsExportError)
from .engine import SimClock
from .metrics import RunCounters, MetricsRecorder, export_metrics, load_metrics
from .dram import DramConfig, DramModule, DramAddress, Cell, FlipRecord
from .chiptrr import ChipTrr, TrackerTable
from .vm_mmu import Mmu, PageTableEntry, PteRef, Fault, FaultErrorCode, AccessType, TranslationContext
from .os_kernel import Kernel, Vma, PageRole
from .softtrr import SoftTrr, DefenseParams
from .attacks import (HammerPattern, HammerSession, run_hammer, run_memory_spray, run_cattmew,
                      run_pthammer, run_attack, fuzz_patterns)
from .mapping_probe import MappingProbe, LatencySample, ProbeResult, recover_bank_functions
from .scenario import ScenarioConfig, load_scenario, parse_scenario
from .harness import Simulation, RunReport, run_scenario, emit_metrics

__all__ = [
    'SimulationError',
    'AddressError',
    'ContractError',
    'PlacementError',
    'SegmentationError',
    'OutOfMemoryError',
    'ConfigError',
    'ScenarioError',
    'InvariantViolation',
    'MetricsExportError',
    'SimClock',
    'RunCounters',
    'MetricsRecorder',
    'export_metrics',
    'load_metrics',
    'DramConfig',
    'DramModule',
    'DramAddress',
    'Cell',
    'FlipRecord',
    'ChipTrr',
    'TrackerTable',
    'Mmu',
    'PageTableEntry',
    'PteRef',
    'Fault',
    'FaultErrorCode',
    'AccessType',
    'TranslationContext',
    'Kernel',
    'Vma',
    'PageRole',
    'SoftTrr',
    'DefenseParams',
    'HammerPattern',
    'HammerSession',
    'run_hammer',
    'run_memory_spray',
    'run_cattmew',
    'run_pthammer',
    'run_attack',
    'fuzz_patterns',
    'MappingProbe',
    'LatencySample',
    'ProbeResult',
    'recover_bank_functions',
    'ScenarioConfig',
    'load_scenario',
    'parse_scenario',
    'Simulation',
    'RunReport',
    'run_scenario',
    'emit_metrics',
]
