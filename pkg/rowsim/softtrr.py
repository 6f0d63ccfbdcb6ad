"""
Software Target Row Refresh
Page-table collector, adjacent-page tracer and row refresher protecting
leaf page-table rows from hammering of nearby user-accessible pages.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Set, Tuple

from config import Config
from .dram import PAGE_SHIFT, DramAddress
from .errors import ConfigError, InvariantViolation
from .metrics import RunCounters
from .os_kernel import PAGES_PER_HUGE, Kernel, PageRole
from .vm_mmu import PTE_PPN_MASK, PTE_PRESENT, Fault, FaultErrorCode, PteRef, TranslationContext

logger = logging.getLogger(__name__)

RowKey = Tuple[int, int]  # (bank, row)


@dataclass
class DefenseParams:
    """Defense tuning (times in ns)"""
    timer_inr: int = Config.TIMER_INR
    count_limit: int = Config.COUNT_LIMIT
    max_distance: int = Config.DEFENSE_MAX_DISTANCE
    ring_capacity: int = Config.RING_CAPACITY
    tree_node_bytes: int = Config.TREE_NODE_BYTES
    ring_entry_bytes: int = Config.RING_ENTRY_BYTES

    @property
    def threshold(self) -> int:
        return self.timer_inr * (self.count_limit - 1)

    def validate(self, dram_config):
        if self.count_limit < 2:
            raise ConfigError("defense.count_limit must be >= 2")
        if self.timer_inr <= 0:
            raise ConfigError("defense.timer_inr must be > 0")
        if self.max_distance < 1:
            raise ConfigError("defense.max_distance must be >= 1")
        if self.ring_capacity < 1:
            raise ConfigError("defense.ring_capacity must be >= 1")
        budget = dram_config.t_rc * dram_config.hc_first
        if self.threshold > budget:
            raise ConfigError(f"timer_inr x (count_limit - 1) = {self.threshold} ns exceeds "
                              f"t_rc x hc_first = {budget} ns")


@dataclass
class BankRecord:
    bank: int
    pt_count: int = 0
    leak_count: int = 0


class RingEntry(NamedTuple):
    pid: int
    va: int
    ref: PteRef
    ppn: int


class CollectStats(NamedTuple):
    processes: int
    pt_pages: int
    adj_pages: int
    row_nodes: int


class ArmStats(NamedTuple):
    armed: int
    drained: int
    stale: int


class RefreshStats(NamedTuple):
    rows: int
    reads: int


class Footprint(NamedTuple):
    pt_nodes: int
    adj_nodes: int
    row_nodes: int
    ring_capacity: int
    bytes: int


class PtSet:
    """Leaf page-table pages keyed by ppn, with their (bank, row) footprint"""

    def __init__(self):
        self._pages: Dict[int, Tuple[RowKey, ...]] = {}
        self.by_row: Dict[RowKey, Set[int]] = {}

    def add(self, ppn: int, footprint: Tuple[RowKey, ...]) -> bool:
        if ppn in self._pages:
            return False
        self._pages[ppn] = footprint
        for key in footprint:
            self.by_row.setdefault(key, set()).add(ppn)
        return True

    def remove(self, ppn: int) -> Tuple[RowKey, ...]:
        footprint = self._pages.pop(ppn)
        for key in footprint:
            members = self.by_row[key]
            members.discard(ppn)
            if not members:
                del self.by_row[key]
        return footprint

    def __contains__(self, ppn: int) -> bool:
        return ppn in self._pages

    def __len__(self) -> int:
        return len(self._pages)

    def __iter__(self):
        return iter(sorted(self._pages))


class AdjSet:
    """
    Adjacent pages keyed by ppn. A pending node has not been armed by a
    timer yet. Arming only clears the flag: a member stays until its page
    is freed or loses its last mapping near a protected row, so the set
    always equals the adjacency of the current kernel state.
    """

    def __init__(self):
        self._nodes: Dict[int, bool] = {}

    def add(self, ppn: int, pending: bool = True) -> bool:
        if ppn in self._nodes:
            return False
        self._nodes[ppn] = pending
        return True

    def discard(self, ppn: int) -> bool:
        return self._nodes.pop(ppn, None) is not None

    def pending(self) -> List[int]:
        return sorted(p for p, waiting in self._nodes.items() if waiting)

    def mark_armed(self, ppn: int):
        if ppn in self._nodes:
            self._nodes[ppn] = False

    def __contains__(self, ppn: int) -> bool:
        return ppn in self._nodes

    def __len__(self) -> int:
        return len(self._nodes)

    def __iter__(self):
        return iter(sorted(self._nodes))


class PtRowMap:
    """row -> bank-sorted BankRecords; empty records and rows are deleted"""

    def __init__(self):
        self.rows: Dict[int, List[BankRecord]] = {}

    def get(self, bank: int, row: int) -> Optional[BankRecord]:
        for record in self.rows.get(row, ()):
            if record.bank == bank:
                return record
        return None

    def add_pt(self, bank: int, row: int) -> BankRecord:
        record = self.get(bank, row)
        if record is None:
            record = BankRecord(bank)
            records = self.rows.setdefault(row, [])
            records.append(record)
            records.sort(key=lambda r: r.bank)
        record.pt_count += 1
        return record

    def remove_pt(self, bank: int, row: int) -> bool:
        """Decrement pt_count; True when the record was deleted"""
        record = self.get(bank, row)
        if record is None:
            return False
        record.pt_count -= 1
        if record.pt_count > 0:
            return False
        records = self.rows[row]
        records.remove(record)
        if not records:
            del self.rows[row]
        return True

    def records(self) -> List[Tuple[RowKey, BankRecord]]:
        return [((rec.bank, row), rec) for row in sorted(self.rows) for rec in self.rows[row]]

    def __len__(self) -> int:
        return len(self.rows)


class _Ring:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self.slots: List[Optional[RingEntry]] = [None] * capacity
        self.head = 0
        self.tail = 0
        self.count = 0

    def push(self, entry: RingEntry):
        if self.count == self.capacity:
            raise InvariantViolation("ring overflow")
        self.slots[self.tail] = entry
        self.tail = (self.tail + 1) % self.capacity
        self.count += 1

    def pop(self) -> RingEntry:
        entry = self.slots[self.head]
        self.slots[self.head] = None
        self.head = (self.head + 1) % self.capacity
        self.count -= 1
        return entry

    @property
    def empty(self) -> bool:
        return self.count == 0


class PteRing:
    """
    Circular queue of PTEs waiting to be re-armed. Reaching the load
    factor replaces the buffer with one growth_factor times larger; the
    old buffer is drained before the new one and then retired.
    """

    def __init__(self, capacity: int = Config.RING_CAPACITY, load: float = Config.RING_GROWTH_LOAD,
                 growth_factor: int = Config.RING_GROWTH_FACTOR):
        self.load = load
        self.growth_factor = growth_factor
        self.active = _Ring(capacity)
        self.retiring: List[_Ring] = []
        self.growths = 0

    @property
    def capacity(self) -> int:
        return self.active.capacity

    def __len__(self) -> int:
        return self.active.count + sum(r.count for r in self.retiring)

    def push(self, entry: RingEntry):
        self.active.push(entry)
        if self.active.count >= self.load * self.active.capacity:
            self.retiring.append(self.active)
            self.active = _Ring(self.active.capacity * self.growth_factor)
            self.growths += 1
            logger.debug(f"PTE ring grown to {self.active.capacity} entries")

    def drain(self) -> List[RingEntry]:
        entries = []
        for ring in self.retiring + [self.active]:
            while not ring.empty:
                entries.append(ring.pop())
        self.retiring = []
        return entries


@dataclass
class _Exposure:
    open_since: Optional[int] = None
    accumulated: int = 0
    epoch: int = 0


@dataclass
class Bookkeeping:
    pt_pages: List[int]
    pt_counts: Dict[RowKey, int]
    adj_pages: List[int]


class SoftTrr:
    """
    The defense attached to one Kernel.

    Pages near a protected row are armed by setting bit 51 in their leaf
    entries. The first access after arming faults; the fault charges
    leak_count on every nearby protected row, disarms the page until the
    next timer and refreshes rows that reached count_limit, which resets
    their leak_count to 0. Exposure is measured from the first tracked
    access after a refresh and is bounded by timer_inr x (count_limit - 1).
    """

    def __init__(self, kernel: Kernel, clock, params: Optional[DefenseParams] = None,
                 counters: Optional[RunCounters] = None):
        self.kernel = kernel
        self.mmu = kernel.mmu
        self.dram = kernel.dram
        self.clock = clock
        self.params = params or DefenseParams()
        self.params.validate(self.dram.config)
        if not self.dram.reversible:
            raise ConfigError("softtrr requires a reversible bank mapping")
        self.counters = counters if counters is not None else kernel.counters
        self.pt_set = PtSet()
        self.adj = AdjSet()
        self.rows = PtRowMap()
        self.ring = PteRing(self.params.ring_capacity)
        self.exposure: Dict[RowKey, _Exposure] = {}
        self.max_unrefreshed_hammer_ns = 0
        self.loaded = False
        self._busy = False

    # ------------------------------------------------------------------
    # Lifecycle
    # ------------------------------------------------------------------
    def load(self) -> CollectStats:
        """Hook into the kernel, scan existing processes and start the timer"""
        hooks = self.kernel.hooks
        hooks.pte_alloc.append(self.on_pte_alloc)
        hooks.free_pages.append(self.on_free_pages)
        hooks.new_user_page.append(self.on_new_user_page)
        hooks.unmap.append(self.on_unmap)
        hooks.page_fault.insert(0, self.on_page_fault)
        stats = self.collect_initial()
        self.clock.schedule_every('softtrr-timer', self.params.timer_inr, self.on_timer,
                                  start=self.clock.now, priority=self.clock.PRIORITY_DEFENSE)
        self.loaded = True
        logger.info(f"SoftTRR loaded: {stats.pt_pages} page tables, {stats.adj_pages} adjacent pages, "
                    f"timer={self.params.timer_inr}ns count_limit={self.params.count_limit} "
                    f"distance={self.params.max_distance}")
        return stats

    def collect_initial(self) -> CollectStats:
        kernel = self.kernel
        for pid in sorted(kernel.processes):
            for ppn in sorted(kernel.processes[pid].tables):
                if kernel.tables[ppn].level == 1:
                    self._add_pt(ppn)
        for ppn in sorted(kernel.rmap):
            if kernel.rmap[ppn] and self._is_adjacent(ppn):
                self.adj.add(ppn)
        return CollectStats(len(kernel.processes), len(self.pt_set), len(self.adj), len(self.rows))

    # ------------------------------------------------------------------
    # Kernel hooks
    # ------------------------------------------------------------------
    def on_pte_alloc(self, ppn: int):
        keys = self._add_pt(ppn)
        candidates: Set[int] = set()
        for bank, row in keys:
            for near in self._neighbour_rows(bank, row):
                candidates.update(self.dram.row_pages(*near))
                for table in self.pt_set.by_row.get(near, ()):
                    candidates.update(p for _, p in self.kernel.table_entries(table))
        if self._near_records(keys):
            candidates.update(p for _, p in self.kernel.table_entries(ppn))
        added = [p for p in sorted(candidates)
                 if self.kernel.rmap.get(p) and p not in self.adj and self._is_adjacent(p)]
        for p in added:
            self.adj.add(p)

    def on_free_pages(self, ppn: int):
        if ppn in self.pt_set:
            for key in self.pt_set.remove(ppn):
                if self.rows.remove_pt(*key):
                    self._drop_exposure(key)
            for member in list(self.adj):
                if not (self.kernel.rmap.get(member) and self._is_adjacent(member)):
                    self.adj.discard(member)
        elif self.adj.discard(ppn):
            logger.debug(f"Adjacent page {ppn} released")

    def on_unmap(self, pid: int, va: int, ppn: int):
        """One mapping of a still mapped page was removed"""
        if ppn in self.adj and not self._is_adjacent(ppn):
            self.adj.discard(ppn)
            logger.debug(f"Page {ppn} no longer adjacent after unmapping {va:#x} in pid {pid}")

    def on_new_user_page(self, ppn: int, leaf_pte: PteRef):
        pages = range(ppn, ppn + PAGES_PER_HUGE) if leaf_pte.level == 2 else (ppn,)
        adjacent = [p for p in pages if self._is_adjacent(p)]
        if not adjacent:
            return
        for p in adjacent:
            self.adj.add(p, pending=False)
        for pid, va in self.kernel.rmap.get(ppn, ()):
            if self.kernel.leaf_pte(pid, va) == leaf_pte:
                self.ring.push(RingEntry(pid, va, leaf_pte, ppn))
                break

    def on_page_fault(self, fault: Fault, ctx: TranslationContext, now: int) -> bool:
        if not fault.code & FaultErrorCode.RSVD:
            return False
        return self.on_rsvd_fault(fault, fault.va, ctx, now)

    # ------------------------------------------------------------------
    # Tracer
    # ------------------------------------------------------------------
    def on_timer(self, now: int) -> ArmStats:
        """Arm every queued PTE and every pending adjacent page"""
        self._enter()
        try:
            kernel = self.kernel
            armed = stale = 0
            drained = self.ring.drain()
            for entry in drained:
                ref = kernel.leaf_pte(entry.pid, entry.va)
                if ref is None or not self._still_tracked(ref, entry):
                    stale += 1
                    continue
                self._arm(ref, entry.pid, entry.va)
                armed += 1
            for ppn in self.adj.pending():
                for pid, va in kernel.rmap.get(ppn, ()):
                    ref = kernel.leaf_pte(pid, va)
                    if ref is not None:
                        self._arm(ref, pid, va)
                        armed += 1
                self.adj.mark_armed(ppn)
            for key, state in self.exposure.items():
                if state.open_since is not None:
                    self._close_segment(state, now)
            if stale:
                logger.debug(f"Skipped {stale} stale PTE ring entries")
            self.counters.armed_ptes += armed
            return ArmStats(armed, len(drained), stale)
        finally:
            self._busy = False

    def on_rsvd_fault(self, fault: Fault, va: int, ctx: TranslationContext, now: int) -> bool:
        """Charge nearby protected rows, disarm the page and refresh rows that reached the limit"""
        self._enter()
        try:
            kernel = self.kernel
            ref = kernel.leaf_pte(ctx.pid, va)
            if ref is None:
                return False
            raw = self.mmu.read_pte(ref)
            ppn = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
            if ref.level == 2:
                span = self.dram.span_footprint(ppn, PAGES_PER_HUGE)
                va_page = va & ~((PAGES_PER_HUGE << PAGE_SHIFT) - 1)
            else:
                span = self.dram.page_footprint(ppn)
                va_page = va & ~((1 << PAGE_SHIFT) - 1)
            keys = set(self._near_records(span))
            if ref.level == 1:
                keys.update(self._near_records(self.dram.page_footprint(ref.table_ppn)))

            self.mmu.clear_rsrv(ref)
            self.mmu.tlb_flush(ctx, va)
            if not keys:
                logger.warning(f"RSVD fault on untracked page {ppn} (pid {ctx.pid}, va {va:#x})")
                return True

            self.ring.push(RingEntry(ctx.pid, va_page, ref, ppn))
            due = []
            for key in sorted(keys):
                record = self.rows.get(*key)
                record.leak_count += 1
                self.counters.leak_events += 1
                self._open_segment(key, now)
                if record.leak_count >= self.params.count_limit:
                    due.append(key)
            if due:
                self.refresh_pt_rows(due, now)
            return True
        finally:
            self._busy = False

    # ------------------------------------------------------------------
    # Refresher
    # ------------------------------------------------------------------
    def refresh_pt_rows(self, keys: Iterable[RowKey], now: int) -> RefreshStats:
        """Read one byte of every row through the direct map, bypassing the cache"""
        count = 0
        for bank, row in sorted(keys):
            pa = self.dram.compose(DramAddress(bank, row, 0))
            kva = self.kernel.direct_map(pa)
            self.mmu.data_cache_flush(pa)
            self.kernel.kernel_read(kva, now)
            record = self.rows.get(bank, row)
            if record is not None:
                record.leak_count = 0
            state = self.exposure.get((bank, row))
            if state is not None:
                if state.open_since is not None:
                    self._close_segment(state, now)
                state.accumulated = 0
            count += 1
        self.counters.refreshes += count
        return RefreshStats(count, count)

    # ------------------------------------------------------------------
    # Introspection
    # ------------------------------------------------------------------
    def footprint(self) -> Footprint:
        p = self.params
        nodes = len(self.pt_set) + len(self.adj) + len(self.rows)
        return Footprint(len(self.pt_set), len(self.adj), len(self.rows), self.ring.capacity,
                         nodes * p.tree_node_bytes + self.ring.capacity * p.ring_entry_bytes)

    def gauges(self) -> Dict[str, int]:
        fp = self.footprint()
        return {'pt_nodes': fp.pt_nodes, 'adj_nodes': fp.adj_nodes, 'ring_capacity': fp.ring_capacity,
                'row_nodes': fp.row_nodes, 'bytes': fp.bytes}

    def bookkeeping(self) -> Bookkeeping:
        return Bookkeeping(
            pt_pages=list(self.pt_set),
            pt_counts={key: rec.pt_count for key, rec in self.rows.records()},
            adj_pages=list(self.adj),
        )

    def recompute(self) -> Bookkeeping:
        """Bookkeeping rebuilt from kernel state alone"""
        kernel = self.kernel
        pt_pages = kernel.leaf_tables()
        counts: Dict[RowKey, int] = {}
        for ppn in pt_pages:
            for key in self.dram.page_footprint(ppn):
                counts[key] = counts.get(key, 0) + 1
        d = self.params.max_distance

        def near(footprint):
            return any((bank, row + s * k) in counts
                       for bank, row in footprint for k in range(1, d + 1) for s in (-1, 1))

        adj_pages = []
        for ppn in sorted(kernel.rmap):
            mappings = kernel.rmap[ppn]
            if not mappings or kernel.pages.get(ppn) is None:
                continue
            footprints = [self.dram.page_footprint(ppn)]
            for pid, va in mappings:
                table = kernel.leaf_table_of(pid, va)
                if table is not None:
                    footprints.append(self.dram.page_footprint(table))
            if any(near(fp) for fp in footprints):
                adj_pages.append(ppn)
        return Bookkeeping(pt_pages, counts, adj_pages)

    def signature(self):
        """Defense state that must match for two refresh windows to repeat"""
        return ('softtrr', tuple((key, rec.leak_count) for key, rec in self.rows.records()),
                len(self.ring), self.ring.capacity, len(self.adj), tuple(self.adj.pending()),
                tuple(sorted(k for k, s in self.exposure.items() if s.open_since is not None)))

    def shift_time(self, delta: int):
        for state in self.exposure.values():
            if state.open_since is not None:
                state.open_since += delta

    # ------------------------------------------------------------------
    # Internals
    # ------------------------------------------------------------------
    def _enter(self):
        if self._busy:
            raise InvariantViolation("defense entry point re-entered")
        self._busy = True

    def _add_pt(self, ppn: int) -> Tuple[RowKey, ...]:
        footprint = self.dram.page_footprint(ppn)
        if self.pt_set.add(ppn, footprint):
            for key in footprint:
                self.rows.add_pt(*key)
        return footprint

    def _neighbour_rows(self, bank: int, row: int) -> List[RowKey]:
        d = self.params.max_distance
        n_rows = self.dram.n_rows
        return [(bank, r) for k in range(1, d + 1) for r in (row - k, row + k) if 0 <= r < n_rows]

    def _near_records(self, footprint: Iterable[RowKey]) -> List[RowKey]:
        """Protected rows within max_distance (same bank, distance >= 1) of footprint"""
        found = set()
        rows = self.rows.rows
        for bank, row in footprint:
            for key in self._neighbour_rows(bank, row):
                if key[1] in rows and self.rows.get(*key) is not None:
                    found.add(key)
        return sorted(found)

    def _relevant_records(self, ppn: int) -> List[RowKey]:
        keys = set(self._near_records(self.dram.page_footprint(ppn)))
        for pid, va in self.kernel.rmap.get(ppn, ()):
            table = self.kernel.leaf_table_of(pid, va)
            if table is not None:
                keys.update(self._near_records(self.dram.page_footprint(table)))
        return sorted(keys)

    def _is_adjacent(self, ppn: int) -> bool:
        info = self.kernel.pages.get(ppn)
        if info is None or info.role == PageRole.PAGE_TABLE:
            return False
        return bool(self._relevant_records(ppn))

    def _arm(self, ref: PteRef, pid: int, va: int):
        self.mmu.set_rsrv(ref)
        proc = self.kernel.processes.get(pid)
        if proc is not None:
            self.mmu.tlb_flush(proc.ctx, va)

    def _exposure_state(self, key: RowKey) -> _Exposure:
        state = self.exposure.get(key)
        if state is None:
            state = _Exposure(epoch=self.dram.refresh_epoch)
            self.exposure[key] = state
        elif state.epoch != self.dram.refresh_epoch:
            # the row was recharged by auto refresh since the last update
            state.accumulated = 0
            if state.open_since is not None:
                state.open_since = max(state.open_since, self.dram.last_auto_refresh)
            state.epoch = self.dram.refresh_epoch
        return state

    def _open_segment(self, key: RowKey, now: int) -> bool:
        state = self._exposure_state(key)
        if state.open_since is not None:
            return False
        state.open_since = now
        return True

    def _close_segment(self, state: _Exposure, now: int):
        if state.epoch != self.dram.refresh_epoch:
            state.accumulated = 0
            state.open_since = max(state.open_since, self.dram.last_auto_refresh)
            state.epoch = self.dram.refresh_epoch
        state.accumulated += now - state.open_since
        state.open_since = None
        if state.accumulated > self.max_unrefreshed_hammer_ns:
            self.max_unrefreshed_hammer_ns = state.accumulated

    def _drop_exposure(self, key: RowKey):
        state = self.exposure.pop(key, None)
        if state is not None and state.open_since is not None:
            self._close_segment(state, self.clock.now)

    def _still_tracked(self, ref: PteRef, entry: RingEntry) -> bool:
        """The entry still maps the page it was queued for and that page is still adjacent"""
        raw = self.mmu.read_pte(ref)
        if ref != entry.ref or not raw & PTE_PRESENT:
            return False
        ppn = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
        if ppn != entry.ppn:
            return False
        if ref.level == 2:
            return any(p in self.adj for p in range(ppn, ppn + PAGES_PER_HUGE))
        return ppn in self.adj
