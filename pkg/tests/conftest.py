"""
Shared fixtures: a small two-bank DRAM geometry, hand-wired kernel
systems and full simulations built from the default scenario.
"""
from __future__ import annotations

from types import SimpleNamespace
from typing import Optional

import pytest

from rowsim.dram import Cell, DramConfig, DramModule
from rowsim.engine import SimClock
from rowsim.harness import Simulation
from rowsim.metrics import RunCounters
from rowsim.os_kernel import Kernel
from rowsim.scenario import AttackSettings, DefenseSettings, ScenarioConfig
from rowsim.softtrr import DefenseParams, SoftTrr
from rowsim.vm_mmu import Mmu


def small_config(**overrides) -> DramConfig:
    """2 banks x 256 rows x 8 KiB (4 MiB); page p sits in bank (p >> 1) & 1, row p >> 2"""
    values = dict(bank_fns=[0x2000], row_shift=14, row_bits=8, column_bits=13,
                  rows_per_bank=256, row_size=8192)
    values.update(overrides)
    return DramConfig(**values)


def plant_cell(dram: DramModule, bank: int, row: int, offset: int = 0, bit: int = 0, direction: int = 0):
    dram.cells[(bank, row)] = [Cell(offset, bit, direction)]
    dram.has_cells[bank, row] = True


@pytest.fixture
def dram_config():
    return small_config


@pytest.fixture
def plant():
    return plant_cell


@pytest.fixture
def make_system():
    """Clock, DRAM, MMU and kernel wired together without a defense"""
    def build(config: Optional[DramConfig] = None, policy: str = 'segregated') -> SimpleNamespace:
        counters = RunCounters()
        clock = SimClock()
        dram = DramModule(config or small_config(), counters)
        mmu = Mmu(dram, clock, counters)
        kernel = Kernel(mmu, clock, policy)
        return SimpleNamespace(counters=counters, clock=clock, dram=dram, mmu=mmu, kernel=kernel)
    return build


@pytest.fixture
def make_defense():
    def build(system: SimpleNamespace, **params) -> SoftTrr:
        defense = SoftTrr(system.kernel, system.clock, DefenseParams(**params), system.counters)
        defense.load()
        return defense
    return build


def scenario_for(defense: str = 'none', dram: Optional[dict] = None, attack: Optional[dict] = None,
                 **defense_fields) -> ScenarioConfig:
    return ScenarioConfig(
        dram=DramConfig(**(dram or {})),
        defense=DefenseSettings(mode=defense, **defense_fields),
        attack=AttackSettings(**(attack or {})),
    ).validate()


@pytest.fixture
def make_sim():
    """Full simulation on the default 64 MiB geometry"""
    def build(defense: str = 'none', seed: Optional[int] = None, dram: Optional[dict] = None,
              **defense_fields) -> Simulation:
        return Simulation(scenario_for(defense, dram, **defense_fields), seed=seed)
    return build
