"""
Harness Module
Builds a complete simulated system from a scenario, runs it and emits
the metrics time series.
"""
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import pandas as pd

from config import Config
from .attacks import (AGGRESSOR_BASE, AttackReport, HammerPattern, HammerReport, find_victims,
                      place_victim_tables, run_attack, run_hammer)
from .chiptrr import ChipTrr
from .dram import DramModule, FlipRecord
from .engine import SimClock
from .errors import InvariantViolation
from .metrics import MetricsRecorder, RunCounters, export_metrics
from .os_kernel import Kernel, Vma
from .scenario import ScenarioConfig
from .softtrr import DefenseParams, SoftTrr
from .vm_mmu import Mmu

logger = logging.getLogger(__name__)

WORKLOAD_BASE = 0x400000
WORKLOAD_PAGES = 16


@dataclass
class RunSettings:
    defense: str
    seed: int
    fast_forward: bool
    duration: int


class Simulation:
    """
    One simulated machine: DRAM, MMU, kernel, the configured defense and
    the 1 ms metrics sampler, all driven by a single SimClock.

    Args:
        scenario: Validated scenario
        seed: Overrides scenario.attack.seed (vulnerability map and attacks)
        workload: Spawn the benign background process
    """

    def __init__(self, scenario: ScenarioConfig, seed: Optional[int] = None, workload: bool = True):
        self.scenario = scenario
        attack = scenario.attack
        self.settings = RunSettings(scenario.defense.mode, attack.seed if seed is None else seed,
                                    attack.fast_forward, attack.duration)
        self.counters = RunCounters()
        self.clock = SimClock()
        self.dram = DramModule(scenario.dram, self.counters)
        self.dram.seed_vulnerability(self.settings.seed, scenario.dram.flip_density)
        self.dram.flip_listeners.append(self._classify_flip)
        self.dram.attach(self.clock)
        self.mmu = Mmu(self.dram, self.clock, self.counters)
        self.kernel = Kernel(self.mmu, self.clock)
        self.recorder = MetricsRecorder(self.counters, Config.SAMPLE_INTERVAL)
        self.recorder.attach(self.clock)
        self.defense: Optional[SoftTrr] = None
        self.trr: Optional[ChipTrr] = None
        self.workload_pid: Optional[int] = None

        if workload:
            self.workload_pid = self.kernel.spawn_process(
                [Vma(WORKLOAD_BASE, WORKLOAD_PAGES << 12, populate=True)])

        d = scenario.defense
        if d.mode == 'softtrr':
            params = DefenseParams(timer_inr=d.timer_inr, count_limit=d.count_limit,
                                   max_distance=d.max_distance, ring_capacity=d.ring_capacity)
            self.defense = SoftTrr(self.kernel, self.clock, params, self.counters)
            self.defense.load()
            self.recorder.gauge_source = self.defense.gauges
        elif d.mode == 'chiptrr':
            self.trr = ChipTrr(self.dram, d.chiptrr_k, d.chiptrr_threshold, self.counters)
            self.trr.attach(self.clock)

    def _classify_flip(self, record: FlipRecord):
        if self.kernel.is_pt_row(record.bank, record.row):
            self.counters.flips_pt += 1
            logger.debug(f"Flip in page-table row ({record.bank}, {record.row}) at {record.pa:#x} bit {record.bit}")
        else:
            self.counters.flips_other += 1

    def run_for(self, ns: int):
        self.clock.advance(ns)

    @property
    def max_unrefreshed_hammer_ns(self) -> int:
        return self.defense.max_unrefreshed_hammer_ns if self.defense is not None else 0

    def check_exposure_bound(self):
        """Exposure of any protected row stays within timer_inr x (count_limit - 1) + fault_service_time"""
        if self.defense is None:
            return
        bound = self.defense.params.threshold + self.dram.config.fault_service_time
        if self.defense.max_unrefreshed_hammer_ns > bound:
            raise InvariantViolation(
                f"unrefreshed hammer exposure {self.defense.max_unrefreshed_hammer_ns} ns exceeds {bound} ns")


def simulation_factory(scenario: ScenarioConfig, workload: bool = True) -> Callable[[int], Simulation]:
    return lambda seed: Simulation(scenario, seed=seed, workload=workload)


@dataclass
class RunReport:
    scenario: str
    defense: str
    flips_total: int
    flips_in_pt_rows: int
    rsvd_faults: int
    refreshes: int
    armed_ptes: int
    leak_events: int
    activations: int
    max_unrefreshed_hammer_ns: int
    sim_ns: int
    frame: pd.DataFrame
    footprint: List[Dict] = field(default_factory=list)
    attack: Optional[AttackReport] = None
    hammer: Optional[HammerReport] = None
    wall_time: float = 0.0

    @property
    def security_violated(self) -> bool:
        return self.defense == 'softtrr' and self.flips_in_pt_rows > 0

    def summary(self) -> Dict:
        """Deterministic summary record (wall time excluded)"""
        summary = {
            'scenario': self.scenario,
            'defense': self.defense,
            'flips_total': self.flips_total,
            'flips_in_pt_rows': self.flips_in_pt_rows,
            'rsvd_faults': self.rsvd_faults,
            'refreshes': self.refreshes,
            'armed_ptes': self.armed_ptes,
            'leak_events': self.leak_events,
            'activations': self.activations,
            'max_unrefreshed_hammer_ns': self.max_unrefreshed_hammer_ns,
            'sim_ns': self.sim_ns,
        }
        if self.footprint:
            summary['peak_footprint_bytes'] = max(p['bytes'] for p in self.footprint)
        if self.attack is not None:
            summary['victims'] = len(self.attack.victims)
            summary['corrupted_tables'] = self.attack.corrupted_tables
        return summary


def _pattern_run(sim: Simulation, kind: str, duration: int) -> HammerReport:
    """Hammer one leaf table placed on a vulnerable row with the named pattern"""
    offsets = {'double': (-1, 1), 'single': (-2, 3), 'one_location': (-1,), 'many': (-1, 1, 3)}[kind]
    victim = find_victims(sim, 1, offsets)[0]
    pid = sim.kernel.spawn_process()
    place_victim_tables(sim, pid, [victim])
    rows = [victim.row + off for off in offsets]
    pattern = HammerPattern(kind, victim.bank, rows, duration=duration)
    return run_hammer(sim, pattern, pid, va_base=AGGRESSOR_BASE)


def run_scenario(scenario: ScenarioConfig) -> RunReport:
    """Build the system, run the configured attack (or idle) and collect the report"""
    started = time.perf_counter()
    logger.info(f"Starting scenario {scenario.source}: defense={scenario.defense.mode} "
                f"attack={scenario.attack.scenario} pattern={scenario.attack.pattern}")
    sim = Simulation(scenario)
    attack = scenario.attack
    attack_report = None
    hammer_report = None
    if attack.duration > 0:
        if attack.scenario != 'none':
            attack_report = run_attack(sim, attack.scenario, attack.m, attack.duration)
        elif attack.pattern != 'none':
            hammer_report = _pattern_run(sim, attack.pattern, attack.duration)
        else:
            sim.run_for(attack.duration)
    sim.check_exposure_bound()

    c = sim.counters
    report = RunReport(
        scenario=attack.scenario if attack.scenario != 'none' else attack.pattern,
        defense=scenario.defense.mode,
        flips_total=c.flips_total,
        flips_in_pt_rows=c.flips_pt,
        rsvd_faults=c.rsvd_faults,
        refreshes=c.refreshes,
        armed_ptes=c.armed_ptes,
        leak_events=c.leak_events,
        activations=c.activations,
        max_unrefreshed_hammer_ns=sim.max_unrefreshed_hammer_ns,
        sim_ns=sim.clock.now,
        frame=sim.recorder.to_frame(),
        footprint=list(sim.recorder.footprint),
        attack=attack_report,
        hammer=hammer_report,
        wall_time=time.perf_counter() - started,
    )
    logger.info(f"Scenario finished in {report.wall_time:.2f}s: {report.flips_total} flips "
                f"({report.flips_in_pt_rows} in page-table rows), {report.rsvd_faults} RSVD faults, "
                f"{report.refreshes} refreshes")
    return report


def emit_metrics(report: RunReport, path: str, fmt: str = Config.DEFAULT_METRICS_FORMAT):
    export_metrics(report.frame, report.summary(), path, fmt)
