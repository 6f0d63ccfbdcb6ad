"""
Attacks Module
Hammer patterns, the hammer session driver, the three page-table attacks
and a many-sided pattern fuzzer.
"""
import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from .dram import PAGE_SHIFT, PAGE_SIZE, Cell, DramAddress, FlipRecord
from .errors import PlacementError, ScenarioError
from .metrics import RunCounters
from .os_kernel import HUGE_SIZE, PageRole
from .vm_mmu import AccessType

if TYPE_CHECKING:
    from .harness import Simulation

logger = logging.getLogger(__name__)

PATTERN_KINDS = ('double', 'single', 'one_location', 'many')

SPRAY_BASE = 0x10000000
AGGRESSOR_BASE = 0x40000000
BUFFER_BASE = 0x60000000

# counters that must stay still for a block to count as steady
QUIET_FIELDS = ('faults', 'rsvd_faults', 'leak_events', 'refreshes', 'armed_ptes',
                'flips_pt', 'flips_other', 'trr_refreshes')


@dataclass
class HammerPattern:
    """
    Aggressor rows of one bank and the order they are accessed in.

    double: two rows sandwiching a victim; single: two rows picked at
    random; one_location: one row; many: more than two rows.
    """
    kind: str
    bank: int
    rows: List[int]
    order: str = 'sequential'
    duration: int = Config.ATTACK_DURATION

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown hammer pattern: {self.kind}")
        expected = {'double': 2, 'single': 2, 'one_location': 1}
        if self.kind in expected and len(self.rows) != expected[self.kind]:
            raise ValueError(f"{self.kind} hammering needs {expected[self.kind]} aggressor rows")
        if self.kind == 'many' and len(self.rows) <= 2:
            raise ValueError("many-sided hammering needs more than two aggressor rows")
        if len(set(self.rows)) != len(self.rows):
            raise ValueError("aggressor rows must be distinct")

    @property
    def aggressors(self) -> List[Tuple[int, int]]:
        return [(self.bank, r) for r in self.rows]

    @classmethod
    def double(cls, bank: int, victim_row: int, distance: int = 1, **kwargs) -> 'HammerPattern':
        return cls('double', bank, [victim_row - distance, victim_row + distance], **kwargs)

    @classmethod
    def single(cls, bank: int, n_rows: int, rng: np.random.Generator, **kwargs) -> 'HammerPattern':
        rows = sorted(int(r) for r in rng.choice(n_rows, size=2, replace=False))
        return cls('single', bank, rows, **kwargs)

    @classmethod
    def one_location(cls, bank: int, row: int, **kwargs) -> 'HammerPattern':
        return cls('one_location', bank, [row], **kwargs)

    @classmethod
    def many(cls, bank: int, first_row: int, n: int, spacing: int = 2, **kwargs) -> 'HammerPattern':
        return cls('many', bank, [first_row + i * spacing for i in range(n)], **kwargs)


@dataclass
class AccessStep:
    pid: int
    va: int
    walk: bool = False  # flush the TLB entry and the leaf PTE line instead of the data line
    flush_tlb: bool = True
    pte_pa: Optional[int] = None
    pa: Optional[int] = None


@dataclass
class HammerReport:
    flips: List[FlipRecord]
    flips_pt: int
    activations: int
    elapsed: int
    windows_skipped: int = 0


@dataclass
class Victim:
    bank: int
    row: int
    ppn: int
    cell: Cell


@dataclass
class VictimResult:
    bank: int
    row: int
    ppn: int
    flips: int
    flips_pt: int
    corrupted_bytes: int
    hammer_ns: int = 0


@dataclass
class AttackReport:
    name: str
    m: int
    defense: str
    victims: List[VictimResult] = field(default_factory=list)
    flips_total: int = 0
    flips_in_pt_rows: int = 0
    corrupted_tables: int = 0
    elapsed: int = 0

    @property
    def succeeded(self) -> bool:
        return self.corrupted_tables > 0


@dataclass
class FuzzTrial:
    n: int
    spacing: int
    order: str
    duration: int
    bank: int
    rows: List[int]
    flips: int
    flips_pt: int


@dataclass
class FuzzReport:
    defense: str
    trials: List[FuzzTrial] = field(default_factory=list)

    @property
    def hits(self) -> List[FuzzTrial]:
        return [t for t in self.trials if t.flips > 0]

    @property
    def pt_hits(self) -> List[FuzzTrial]:
        return [t for t in self.trials if t.flips_pt > 0]


@dataclass
class _Block:
    trace: Tuple[Tuple[int, int], ...]
    elapsed: int
    quiet: bool
    trr_before: tuple
    trr_after: tuple


class HammerSession:
    """
    Runs hammer iterations until a deadline.

    Iterations run exactly while anything happens. Once two consecutive
    blocks of iterations are identical and event-free the block is
    replayed in bulk up to the next scheduled event, and once two
    consecutive refresh windows leave identical counter deltas the
    remaining whole windows are replicated.
    """

    def __init__(self, sim: 'Simulation', steps: Sequence[AccessStep], duration: int,
                 fast_forward: bool = True):
        self.sim = sim
        self.steps = list(steps)
        self.duration = duration
        self.fast_forward = fast_forward
        self.block_iterations = sim.trr.k + 1 if sim.trr is not None else 1
        self.windows_skipped = 0
        self._marks: List[Tuple[Dict[str, int], tuple]] = []
        self._epoch = sim.dram.refresh_epoch

    def run(self) -> HammerReport:
        sim = self.sim
        clock, dram, counters = sim.clock, sim.dram, sim.counters
        start = clock.now
        end = start + self.duration
        flips_before = len(dram.flip_log)
        before = counters.snapshot()
        previous: Optional[_Block] = None
        while clock.now < end:
            block = self._run_block(end)
            if block is None:
                break
            if previous is not None and self._steady(previous, block):
                self._bulk(block, end)
            previous = block
            if self.fast_forward and self._window_fast_forward(end):
                previous = None
        after = counters.snapshot()
        return HammerReport(
            flips=dram.flip_log[flips_before:],
            flips_pt=after['flips_pt'] - before['flips_pt'],
            activations=after['activations'] - before['activations'],
            elapsed=clock.now - start,
            windows_skipped=self.windows_skipped,
        )

    def _iteration(self):
        sim = self.sim
        mmu, clock = sim.mmu, sim.clock
        for step in self.steps:
            ctx = sim.kernel.processes[step.pid].ctx
            if step.walk:
                if step.flush_tlb:
                    mmu.tlb_flush(ctx, step.va)
                    clock.advance(Config.INVLPG_COST)
                mmu.pte_cache_flush(step.pte_pa)
                clock.advance(Config.FLUSH_COST)
            elif step.pa is not None:
                mmu.data_cache_flush(step.pa)
                clock.advance(Config.FLUSH_COST)
            result = mmu.access_memory(ctx, step.va, AccessType.READ, user=True)
            if result.ok:
                step.pa = result.pa

    def _run_block(self, end: int) -> Optional[_Block]:
        sim = self.sim
        clock, dram, counters = sim.clock, sim.dram, sim.counters
        trr_before = sim.trr.state() if sim.trr is not None else ()
        before = counters.snapshot()
        fired = clock.fired
        t0 = clock.now
        dram.trace = []
        try:
            for _ in range(self.block_iterations):
                if clock.now >= end:
                    return None
                self._iteration()
            trace = tuple((b, r) for b, r, _ in dram.trace)
        finally:
            dram.trace = None
        after = counters.snapshot()
        quiet = clock.fired == fired and all(after[k] == before[k] for k in QUIET_FIELDS)
        trr_after = sim.trr.state() if sim.trr is not None else ()
        return _Block(trace, clock.now - t0, quiet, trr_before, trr_after)

    @staticmethod
    def _steady(previous: _Block, block: _Block) -> bool:
        return (previous.quiet and block.quiet and block.trace and previous.trace == block.trace
                and previous.elapsed == block.elapsed)

    def _bulk(self, block: _Block, end: int):
        sim = self.sim
        clock, dram = sim.clock, sim.dram
        deltas = dram.block_delta(block.trace)
        repeats = dram.bulk_budget(deltas)
        if sim.trr is not None:
            repeats = min(repeats, sim.trr.bulk_budget(block.trr_before, block.trr_after))
        horizon = end
        next_event = clock.next_event_time()
        if next_event is not None:
            horizon = min(horizon, next_event)
        repeats = min(repeats, (horizon - clock.now) // block.elapsed - 1)
        if repeats <= 0:
            return
        dram.apply_bulk(block.trace, deltas, repeats, block.elapsed)
        if sim.trr is not None:
            sim.trr.apply_bulk(block.trr_before, block.trr_after, repeats)
        clock.run_until(clock.now + repeats * block.elapsed)

    def _signature(self):
        sim = self.sim
        parts = []
        if sim.defense is not None:
            parts.append(sim.defense.signature())
        if sim.trr is not None:
            parts.append(sim.trr.signature())
        return tuple(parts)

    def _window_fast_forward(self, end: int) -> bool:
        sim = self.sim
        dram, clock, counters = sim.dram, sim.clock, sim.counters
        if dram.refresh_epoch == self._epoch:
            return False
        self._epoch = dram.refresh_epoch
        self._marks.append((counters.snapshot(), self._signature()))
        if len(self._marks) < 3:
            return False
        self._marks = self._marks[-3:]
        (c0, s0), (c1, s1), (c2, s2) = self._marks
        d1 = RunCounters.diff(c1, c0)
        d2 = RunCounters.diff(c2, c1)
        if any(d1[k] != d2[k] for k in d2 if k != 'activations') or not s0 == s1 == s2:
            return False
        period = dram.config.refresh_period
        windows = (end - clock.now) // period - 1
        if windows < 1:
            return False
        shift = windows * period
        counters.add_scaled(d2, windows)
        if sim.recorder is not None:
            sim.recorder.replicate(windows, period)
        clock.shift(shift)
        dram.shift_time(shift)
        if sim.defense is not None:
            sim.defense.shift_time(shift)
        self.windows_skipped += windows
        self._marks = []
        logger.debug(f"Fast-forwarded {windows} refresh windows to t={clock.now}")
        return True


# ----------------------------------------------------------------------
# Placement helpers
# ----------------------------------------------------------------------
def _placeable(kernel, ppn: int) -> bool:
    if ppn in kernel.pinned:
        return False
    info = kernel.pages.get(ppn)
    return info is None or info.role == PageRole.USER


def _free_page(kernel, ppn: int) -> bool:
    return kernel.allocator.is_free(ppn) and ppn not in kernel.pinned


def row_page(sim: 'Simulation', bank: int, row: int, need_free: bool = False) -> Optional[int]:
    """A page of (bank, row) an attacker can take over, free pages first"""
    kernel = sim.kernel
    if not 0 <= row < sim.dram.n_rows:
        return None
    pages = sim.dram.row_pages(bank, row)
    for ppn in pages:
        if _free_page(kernel, ppn):
            return ppn
    if need_free:
        return None
    for ppn in pages:
        if _placeable(kernel, ppn):
            return ppn
    return None


def find_victims(sim: 'Simulation', m: int, offsets: Sequence[int], spacing: int = 14,
                 need_free: bool = False) -> List[Victim]:
    """
    Pick m vulnerable rows holding an anti cell (flips 0 -> 1 in a mostly
    zero page table) whose aggressor rows at the given offsets can be
    taken over. Rows in one bank are kept more than spacing rows apart and
    clear of the page-table region at the top of memory.
    """
    dram, kernel = sim.dram, sim.kernel
    lo = 2 * dram.config.max_distance + max(0, -min(offsets, default=0))
    hi = dram.n_rows - 64 - max(0, max(offsets, default=0))
    chosen: Dict[int, List[int]] = {}
    victims: List[Victim] = []
    for bank, row in dram.vulnerable_rows():
        if len(victims) == m:
            break
        if not lo <= row < hi or kernel.is_pt_row(bank, row):
            continue
        if any(abs(row - r) <= spacing for r in chosen.get(bank, [])):
            continue
        anti = [c for c in dram.cells[(bank, row)] if c.direction == 0]
        if not anti:
            continue
        ppn = dram.compose(DramAddress(bank, row, anti[0].offset)) >> PAGE_SHIFT
        if not _placeable(kernel, ppn):
            continue
        if any(row_page(sim, bank, row + off, need_free) is None for off in offsets):
            continue
        chosen.setdefault(bank, []).append(row)
        victims.append(Victim(bank, row, ppn, anti[0]))
    if len(victims) < m:
        logger.warning(f"Only {len(victims)} of {m} vulnerable rows are usable")
        raise ScenarioError(f"insufficient vulnerable rows: found {len(victims)}, need {m}")
    return victims


def _spray_tables(sim: 'Simulation', pid: int, count: int, base: int) -> List[Tuple[int, int]]:
    """count fresh leaf tables, one per 2 MiB region; returns (va, table ppn)"""
    kernel = sim.kernel
    kernel.mmap(pid, base, count * HUGE_SIZE)
    tables = []
    for i in range(count):
        va = base + i * HUGE_SIZE
        kernel.demand_page(pid, va)
        tables.append((va, kernel.leaf_table_of(pid, va)))
    return tables


def _place_user_page(sim: 'Simulation', pid: int, va: int, bank: int, row: int) -> AccessStep:
    kernel = sim.kernel
    source = kernel.demand_page(pid, va)
    target = row_page(sim, bank, row)
    if target is None:
        raise ScenarioError(f"row ({bank}, {row}) has no page an attacker can use")
    kernel.place_page_exact(target, 'user', source)
    return AccessStep(pid, va)


def place_pattern(sim: 'Simulation', pid: int, pattern: HammerPattern, va_base: int,
                  seed: int = 0) -> List[AccessStep]:
    """Attacker pages on every aggressor row, in the pattern's access order"""
    kernel = sim.kernel
    kernel.mmap(pid, va_base, len(pattern.rows) * PAGE_SIZE)
    steps = [_place_user_page(sim, pid, va_base + i * PAGE_SIZE, pattern.bank, row)
             for i, row in enumerate(pattern.rows)]
    if pattern.order == 'shuffled':
        order = np.random.default_rng(seed).permutation(len(steps))
        steps = [steps[int(i)] for i in order]
    return steps


def place_victim_tables(sim: 'Simulation', pid: int, victims: Sequence[Victim],
                        base: int = SPRAY_BASE) -> List[int]:
    """Move one fresh leaf table onto every victim page; returns their vas"""
    if not victims:
        return []
    vas = []
    for victim, (va, table) in zip(victims, _spray_tables(sim, pid, len(victims), base)):
        sim.kernel.place_page_exact(victim.ppn, 'l1pt', table)
        vas.append(va)
    return vas


def _duration(sim: 'Simulation', duration: Optional[int]) -> int:
    return sim.settings.duration if duration is None else duration


# ----------------------------------------------------------------------
# Hammering
# ----------------------------------------------------------------------
def run_hammer(sim: 'Simulation', pattern: HammerPattern, pid: Optional[int] = None,
               va_base: int = AGGRESSOR_BASE) -> HammerReport:
    """Place attacker pages on the pattern's rows and hammer them for pattern.duration"""
    if pid is None:
        pid = sim.kernel.spawn_process()
    steps = place_pattern(sim, pid, pattern, va_base, seed=sim.settings.seed)
    for step in steps:
        step.pa = None
    session = HammerSession(sim, steps, pattern.duration, sim.settings.fast_forward)
    report = session.run()
    logger.info(f"{pattern.kind} hammer on bank {pattern.bank} rows {pattern.rows}: "
                f"{len(report.flips)} flips, {report.activations} activations")
    return report


def _finish(sim: 'Simulation', report: AttackReport, victims: Sequence[Victim], before: Dict[str, int]):
    after = sim.counters.snapshot()
    report.flips_total = (after['flips_pt'] + after['flips_other']) - (before['flips_pt'] + before['flips_other'])
    report.flips_in_pt_rows = after['flips_pt'] - before['flips_pt']
    report.corrupted_tables = sum(1 for v in report.victims if v.corrupted_bytes)
    logger.info(f"{report.name} (m={report.m}, defense={report.defense}): "
                f"{report.corrupted_tables} corrupted page tables, {report.flips_in_pt_rows} page-table row flips")
    return report


def _hammer_victims(sim: 'Simulation', report: AttackReport, victims: Sequence[Victim],
                    steps_per_victim: Sequence[List[AccessStep]], duration: int):
    for victim, steps in zip(victims, steps_per_victim):
        before = sim.counters.snapshot()
        session = HammerSession(sim, steps, duration, sim.settings.fast_forward)
        result = session.run()
        after = sim.counters.snapshot()
        report.victims.append(VictimResult(
            victim.bank, victim.row, victim.ppn,
            flips=len(result.flips),
            flips_pt=after['flips_pt'] - before['flips_pt'],
            corrupted_bytes=len(sim.mmu.integrity_diff(victim.ppn)),
            hammer_ns=result.elapsed,
        ))


def run_memory_spray(sim: 'Simulation', m: int, duration: Optional[int] = None,
                     pattern: str = 'many') -> AttackReport:
    """
    Leaf tables sprayed onto vulnerable rows, hammered through attacker
    pages at V-1, V+1, V+3 (or V-1, V+1 for a double pattern).
    """
    offsets = (-1, 1) if pattern == 'double' else (-1, 1, 3)
    report = AttackReport('memory_spray', m, sim.settings.defense)
    if m == 0:
        return report
    before = sim.counters.snapshot()
    pid = sim.kernel.spawn_process()
    victims = find_victims(sim, m, offsets)
    place_victim_tables(sim, pid, victims)
    sim.kernel.mmap(pid, AGGRESSOR_BASE, m * len(offsets) * PAGE_SIZE)
    plans = []
    for i, victim in enumerate(victims):
        steps = []
        for j, off in enumerate(offsets):
            va = AGGRESSOR_BASE + (i * len(offsets) + j) * PAGE_SIZE
            steps.append(_place_user_page(sim, pid, va, victim.bank, victim.row + off))
        plans.append(steps)
    _hammer_victims(sim, report, victims, plans, _duration(sim, duration))
    return _finish(sim, report, victims, before)


def run_cattmew(sim: 'Simulation', m: int, duration: Optional[int] = None,
                buffer_distance: int = 1) -> AttackReport:
    """Kernel buffer pages mapped to user space at V-d and V+d of each victim table"""
    offsets = (-buffer_distance, buffer_distance)
    report = AttackReport('cattmew', m, sim.settings.defense)
    if m == 0:
        return report
    before = sim.counters.snapshot()
    kernel = sim.kernel
    pid = kernel.spawn_process()
    victims = find_victims(sim, m, offsets, need_free=True)
    place_victim_tables(sim, pid, victims)
    targets = []
    for victim in victims:
        for off in offsets:
            ppn = row_page(sim, victim.bank, victim.row + off, need_free=True)
            if ppn is None or ppn in targets:
                raise PlacementError(f"no free buffer page in row {victim.row + off}")
            targets.append(ppn)
    kernel.map_kernel_buffer(pid, BUFFER_BASE, targets)
    plans = [[AccessStep(pid, BUFFER_BASE + (2 * i + j) * PAGE_SIZE) for j in range(2)]
             for i in range(len(victims))]
    _hammer_victims(sim, report, victims, plans, _duration(sim, duration))
    return _finish(sim, report, victims, before)


def run_pthammer(sim: 'Simulation', m: int, duration: Optional[int] = None,
                 flush_tlb: bool = True) -> AttackReport:
    """
    Leaf tables at V-1 and V+1 of each victim table, activated implicitly
    by page walks after flushing the TLB entry and the leaf PTE line.
    """
    offsets = (-1, 1)
    report = AttackReport('pthammer', m, sim.settings.defense)
    if m == 0:
        return report
    before = sim.counters.snapshot()
    kernel = sim.kernel
    pid = kernel.spawn_process()
    victims = find_victims(sim, m, offsets)
    place_victim_tables(sim, pid, victims)
    aggressors = _spray_tables(sim, pid, 2 * m, SPRAY_BASE + m * HUGE_SIZE)
    plans = []
    for i, victim in enumerate(victims):
        steps = []
        for j, off in enumerate(offsets):
            va, table = aggressors[2 * i + j]
            target = row_page(sim, victim.bank, victim.row + off)
            if target is None:
                raise ScenarioError(f"row ({victim.bank}, {victim.row + off}) cannot hold a page table")
            kernel.place_page_exact(target, 'l1pt', table)
            steps.append(AccessStep(pid, va, walk=True, flush_tlb=flush_tlb,
                                    pte_pa=kernel.leaf_pte(pid, va).pa))
        plans.append(steps)
    if not flush_tlb:
        for steps in plans:
            for step in steps:
                sim.mmu.access_memory(kernel.processes[pid].ctx, step.va)
    _hammer_victims(sim, report, victims, plans, _duration(sim, duration))
    return _finish(sim, report, victims, before)


def run_attack(sim: 'Simulation', name: str, m: int, duration: Optional[int] = None) -> AttackReport:
    runners: Dict[str, Callable] = {
        'memory_spray': run_memory_spray,
        'cattmew': run_cattmew,
        'pthammer': run_pthammer,
    }
    if name not in runners:
        raise ScenarioError(f"unknown attack scenario: {name}")
    logger.info(f"Running {name} with m={m} against defense={sim.settings.defense}")
    return runners[name](sim, m, duration)


def discover_vulnerable_rows(sim: 'Simulation', bank: int, rows: Sequence[int],
                             duration: int = 4_000_000) -> List[int]:
    """
    Hammer-then-scan: fill each candidate row with zeros and then ones,
    hammer it double-sided after each fill and report rows whose pages
    changed. Rows holding allocated pages are skipped.
    """
    dram, kernel = sim.dram, sim.kernel
    pid = kernel.spawn_process()
    found = []
    for i, row in enumerate(rows):
        pages = dram.row_pages(bank, row)
        if not all(_free_page(kernel, p) for p in pages):
            continue
        for fill in (0x00, 0xFF):
            expected = bytes([fill]) * PAGE_SIZE
            for ppn in pages:
                dram.write_page(ppn, expected)
            dram.refresh_row(bank, row, sim.clock.now)
            pattern = HammerPattern.double(bank, row, duration=duration)
            run_hammer(sim, pattern, pid, va_base=AGGRESSOR_BASE + (2 * i + (fill & 1)) * 0x100000)
            if any(dram.read_page(p) != expected for p in pages):
                found.append(row)
                break
    logger.info(f"Discovery hammered {len(rows)} rows of bank {bank}: {len(found)} flipped")
    return found


def fuzz_patterns(factory: Callable[[int], 'Simulation'], budget: int, defense: str,
                  seed: int = 0, stop_on_flip: bool = False) -> FuzzReport:
    """
    Random many-sided trials, each on a fresh simulation from factory(seed).

    A trial samples n in [2, 32] aggressors, spacing in {1, 2, 3}, an
    order and a duration, places leaf tables on the vulnerable rows the
    pattern surrounds and records the flips it produces.
    """
    rng = np.random.default_rng(seed)
    report = FuzzReport(defense)
    for trial in range(budget):
        n = int(rng.integers(2, 33))
        spacing = int(rng.integers(1, 4))
        order = 'shuffled' if rng.random() < 0.5 else 'sequential'
        duration = int(rng.integers(4, 33)) * 1_000_000
        sim = factory(int(rng.integers(0, 2 ** 31)))
        dram = sim.dram
        span = (n - 1) * spacing
        bank = int(rng.integers(0, dram.n_banks))
        first = int(rng.integers(16, dram.n_rows - 96 - span))
        rows = [first + i * spacing for i in range(n)]
        kind = 'many' if n > 2 else 'double'
        if kind == 'double' and spacing != 2:
            kind = 'single'
        pattern = HammerPattern(kind, bank, rows, order=order, duration=duration)

        pid = sim.kernel.spawn_process()
        protected = [r for r in range(first - 1, first + span + 2)
                     if r not in rows and (bank, r) in dram.cells][:4]
        victims = []
        for r in protected:
            anti = [c for c in dram.cells[(bank, r)] if c.direction == 0]
            cell = anti[0] if anti else dram.cells[(bank, r)][0]
            ppn = dram.compose(DramAddress(bank, r, cell.offset)) >> PAGE_SHIFT
            if _placeable(sim.kernel, ppn):
                victims.append(Victim(bank, r, ppn, cell))
        place_victim_tables(sim, pid, victims)
        result = run_hammer(sim, pattern, pid)
        report.trials.append(FuzzTrial(n, spacing, order, duration, bank, rows,
                                       len(result.flips), result.flips_pt))
        if result.flips:
            logger.info(f"Fuzz trial {trial}: n={n} spacing={spacing} order={order} "
                        f"produced {len(result.flips)} flips ({result.flips_pt} in page-table rows)")
            if stop_on_flip:
                break
    return report
