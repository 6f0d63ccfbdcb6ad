"""
In-DRAM Target Row Refresh
Bounded frequent-items tracker per bank that refreshes the neighbours of
rows it sees activated often.
"""
import logging
from typing import Dict, List, Optional, Tuple

from config import Config
from .metrics import RunCounters

logger = logging.getLogger(__name__)

TableState = Tuple[Tuple[Tuple[int, int], ...], ...]


class TrackerTable:
    """
    Misra-Gries tracker with k slots.

    A hit increments its slot, a miss takes a free slot, and a miss on a
    full table decrements every slot instead (dropping zeros).
    """

    def __init__(self, k: int, threshold: int):
        self.k = k
        self.threshold = threshold
        self.entries: Dict[int, int] = {}

    def observe(self, row: int) -> Optional[int]:
        """Count one activation; returns row if it just reached the threshold"""
        if self.k == 0:
            return None
        entries = self.entries
        if row in entries:
            entries[row] += 1
        elif len(entries) < self.k:
            entries[row] = 1
        else:
            for r in list(entries):
                entries[r] -= 1
                if entries[r] <= 0:
                    del entries[r]
            return None
        if entries[row] >= self.threshold:
            del entries[row]
            return row
        return None

    def clear(self):
        self.entries.clear()

    def state(self) -> Tuple[Tuple[int, int], ...]:
        return tuple(sorted(self.entries.items()))


class ChipTrr:
    """
    Per-bank tracker tables wired into DramModule.activate.

    Args:
        dram: Module whose rows get refreshed
        k: Tracker slots per bank (0 disables tracking)
        threshold: Activations that trigger a neighbour refresh
        counters: Shared run counters
    """

    def __init__(self, dram, k: int = Config.CHIPTRR_K, threshold: int = Config.CHIPTRR_THRESHOLD,
                 counters: Optional[RunCounters] = None):
        self.dram = dram
        self.k = k
        self.threshold = threshold
        self.counters = counters if counters is not None else dram.counters
        self.tables = [TrackerTable(k, threshold) for _ in range(dram.n_banks)]
        self.max_distance = dram.config.max_distance
        dram.activation_observer = self.observe_activation
        logger.info(f"ChipTRR enabled: k={k} threshold={threshold}")

    def observe_activation(self, bank: int, row: int, now: int) -> List[int]:
        """Returns the rows refreshed by this activation"""
        hot = self.tables[bank].observe(row)
        if hot is None:
            return []
        refreshed = []
        for d in range(1, self.max_distance + 1):
            for r in (hot - d, hot + d):
                if 0 <= r < self.dram.n_rows:
                    self.dram.refresh_row(bank, r, now)
                    refreshed.append(r)
        self.counters.trr_refreshes += len(refreshed)
        return refreshed

    def reset_on_refresh_window(self, now: int = 0):
        for table in self.tables:
            table.clear()

    def attach(self, clock):
        clock.schedule_every('chiptrr-window-reset', self.dram.config.refresh_period,
                             self.reset_on_refresh_window, priority=clock.PRIORITY_REFRESH)

    # ------------------------------------------------------------------
    # Steady-state support
    # ------------------------------------------------------------------
    def state(self) -> TableState:
        return tuple(t.state() for t in self.tables)

    def signature(self):
        return ('chiptrr', self.state())

    def bulk_budget(self, before: TableState, after: TableState) -> int:
        """
        Replays of a block allowed without a trigger, given the tracker
        state before and after one trigger-free replay of it.

        Identical states repeat forever. States with the same slots whose
        counts all grow by a fixed step are linear and bounded by the
        threshold. Anything else allows no replay.
        """
        if before == after:
            return 1 << 62
        budget = 1 << 62
        for b_state, a_state in zip(before, after):
            if b_state == a_state:
                continue
            b_rows = dict(b_state)
            a_rows = dict(a_state)
            if b_rows.keys() != a_rows.keys():
                return 0
            for row, count in a_rows.items():
                step = count - b_rows[row]
                if step < 0:
                    return 0
                if step == 0:
                    continue
                budget = min(budget, -(-(self.threshold - count) // step) - 2)
        return max(0, budget)

    def apply_bulk(self, before: TableState, after: TableState, repeats: int):
        for table, b_state, a_state in zip(self.tables, before, after):
            b_rows = dict(b_state)
            for row, count in a_state:
                step = count - b_rows.get(row, count)
                if step:
                    table.entries[row] += repeats * step
