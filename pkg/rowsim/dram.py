"""
DRAM Module
Geometry, XOR bank mapping, row-buffer timing, disturbance accumulation,
bit flips and periodic refresh.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from config import Config
from . import gf2
from .errors import AddressError, ConfigError
from .metrics import RunCounters

logger = logging.getLogger(__name__)

PAGE_SHIFT = 12
PAGE_SIZE = 1 << PAGE_SHIFT


class DramAddress(NamedTuple):
    bank: int
    row: int
    column: int


class Cell(NamedTuple):
    """Flippable cell: byte offset within the row, bit, charged value"""
    offset: int
    bit: int
    direction: int  # 1: true cell (1 -> 0), 0: anti cell (0 -> 1)


class FlipRecord(NamedTuple):
    bank: int
    row: int
    pa: int
    bit: int
    old: int
    new: int
    time: int


class AccessOutcome(NamedTuple):
    latency: int
    flipped: Tuple[FlipRecord, ...]
    activated: bool


@dataclass
class RowState:
    """Snapshot of one row"""
    disturbance: float
    last_recharge: int
    open: bool
    flippable_cells: List[Cell]
    hc: float
    flipped: bool


@dataclass
class DramConfig:
    """DRAM geometry and timing (all times in ns)"""
    bank_fns: List[int] = field(default_factory=lambda: list(Config.DRAM_BANK_FNS))
    row_shift: int = Config.DRAM_ROW_SHIFT
    row_bits: int = Config.DRAM_ROW_BITS
    column_bits: int = Config.DRAM_COLUMN_BITS
    rows_per_bank: int = Config.DRAM_ROWS_PER_BANK
    row_size: int = Config.DRAM_ROW_SIZE
    t_rc: int = Config.DRAM_T_RC
    refresh_period: int = Config.DRAM_REFRESH_PERIOD
    max_distance: int = Config.DRAM_MAX_DISTANCE
    weight_decay: float = Config.DRAM_WEIGHT_DECAY
    hc_first: int = Config.DRAM_HC_FIRST
    hc_spread: float = Config.DRAM_HC_SPREAD
    latency_hit: int = Config.DRAM_LATENCY_HIT
    latency_closed: int = Config.DRAM_LATENCY_CLOSED
    latency_conflict: int = Config.DRAM_LATENCY_CONFLICT
    fault_service_time: int = Config.DRAM_FAULT_SERVICE_TIME
    flip_density: float = Config.DRAM_FLIP_DENSITY

    @property
    def n_banks(self) -> int:
        return 1 << len(self.bank_fns)

    @property
    def total_bytes(self) -> int:
        return 1 << (self.row_shift + self.row_bits)

    @property
    def address_bits(self) -> int:
        return self.row_shift + self.row_bits

    def weight(self, distance: int) -> float:
        if distance < 1 or distance > self.max_distance:
            return 0.0
        return self.weight_decay ** (distance - 1)

    def validate(self):
        """Raise ConfigError naming the first violated constraint"""
        if any(m <= 0 for m in self.bank_fns):
            raise ConfigError("dram.bank_fns: every mask must be nonzero")
        if any(m >= self.total_bytes for m in self.bank_fns):
            raise ConfigError("dram.bank_fns: mask uses bits above the physical address width")
        if not gf2.independent(self.bank_fns):
            raise ConfigError("dram.bank_fns: masks must be linearly independent over GF(2)")
        if self.rows_per_bank != 1 << self.row_bits:
            raise ConfigError(f"dram.rows_per_bank must equal 2^row_bits ({1 << self.row_bits})")
        if self.row_size * self.rows_per_bank * self.n_banks != self.total_bytes:
            raise ConfigError("dram: row_size x rows_per_bank x banks must equal total physical memory "
                              f"({self.total_bytes} bytes)")
        if 1 << self.column_bits != self.row_size:
            raise ConfigError("dram.column_bits must satisfy 2^column_bits == row_size")
        if self.t_rc <= 0:
            raise ConfigError("dram.t_rc must be > 0")
        if self.refresh_period <= 0:
            raise ConfigError("dram.refresh_period must be > 0")
        if self.max_distance < 1:
            raise ConfigError("dram.max_distance must be >= 1")
        if not 0.0 < self.weight_decay <= 1.0:
            raise ConfigError("dram.weight_decay must lie in (0, 1]")
        if self.hc_first <= 0:
            raise ConfigError("dram.hc_first must be > 0")
        if self.hc_spread < 0:
            raise ConfigError("dram.hc_spread must be >= 0")
        if not 0.0 <= self.flip_density <= 1.0:
            raise ConfigError("dram.flip_density must lie in [0, 1]")

    @classmethod
    def for_bank_functions(cls, bank_fns: Sequence[int], row_shift: int = 23,
                           row_bits: int = 7, **overrides) -> 'DramConfig':
        """Geometry whose row field sits above every bank bit (probe experiments)"""
        n_banks = 1 << len(bank_fns)
        row_size = (1 << row_shift) // n_banks
        return cls(bank_fns=list(bank_fns), row_shift=row_shift, row_bits=row_bits,
                   column_bits=row_size.bit_length() - 1, rows_per_bank=1 << row_bits,
                   row_size=row_size, flip_density=0.0, **overrides)


class DramModule:
    """
    Byte-addressable DRAM with one row buffer per bank.

    Disturbance is kept per (bank, row) in numpy arrays. An activation
    recharges the opened row (and writes back the row it closes) and adds
    weight_decay^(d-1) to every row of the same bank at distance d in
    [1, max_distance].
    """

    def __init__(self, config: DramConfig, counters: Optional[RunCounters] = None):
        config.validate()
        self.config = config
        self.counters = counters if counters is not None else RunCounters()
        self.n_banks = config.n_banks
        self.n_rows = config.rows_per_bank
        shape = (self.n_banks, self.n_rows)

        self.disturbance = np.zeros(shape, dtype=np.float64)
        self.last_recharge = np.zeros(shape, dtype=np.int64)
        self.hc = np.full(shape, float(config.hc_first), dtype=np.float64)
        self.flipped = np.zeros(shape, dtype=bool)
        self.has_cells = np.zeros(shape, dtype=bool)
        self.cells: Dict[Tuple[int, int], List[Cell]] = {}

        self.open_rows = [-1] * self.n_banks
        self.last_act = [-config.t_rc] * self.n_banks
        self.refresh_epoch = 0
        self.last_auto_refresh = 0

        d = config.max_distance
        self._kernel = np.array([config.weight(abs(i)) for i in range(-d, d + 1)], dtype=np.float64)
        self._fns = [int(m) for m in config.bank_fns]
        self._row_mask = (1 << config.row_bits) - 1
        self._col_mask = (1 << config.column_bits) - 1

        row_field = set(range(config.row_shift, config.address_bits))
        col_field = set(range(config.column_bits))
        free_bits = [b for b in range(config.address_bits) if b not in row_field and b not in col_field]
        self._solver = gf2.PivotSolver(self._fns, free_bits)

        lowest = min([config.row_shift] + [(m & -m).bit_length() - 1 for m in self._fns])
        self._footprint_step = 1 << min(PAGE_SHIFT, lowest)
        self._footprint_cache: Dict[int, Tuple[Tuple[int, int], ...]] = {}
        self._row_pages_cache: Dict[Tuple[int, int], Tuple[int, ...]] = {}
        self._block_cache: Dict[tuple, Dict[int, np.ndarray]] = {}

        self._memory: Optional[bytearray] = None
        self.trace: Optional[list] = None
        self.flip_log: List[FlipRecord] = []
        self.flip_listeners: List[Callable[[FlipRecord], None]] = []
        self.activation_observer: Optional[Callable[[int, int, int], None]] = None

    # ------------------------------------------------------------------
    # Address mapping
    # ------------------------------------------------------------------
    @property
    def reversible(self) -> bool:
        """Every (bank, row, column) has a physical address"""
        return self._solver.solvable

    def bank_of(self, pa: int) -> int:
        bank = 0
        for i, m in enumerate(self._fns):
            bank |= ((pa & m).bit_count() & 1) << i
        return bank

    def map_address(self, pa: int) -> DramAddress:
        if pa < 0 or pa >= self.config.total_bytes:
            raise AddressError(f"physical address {pa:#x} outside {self.config.total_bytes:#x} bytes")
        return DramAddress(self.bank_of(pa), (pa >> self.config.row_shift) & self._row_mask, pa & self._col_mask)

    def compose(self, addr: DramAddress) -> int:
        """Physical address of (bank, row, column)"""
        if not self._solver.solvable:
            raise AddressError("bank mapping is not reversible for this geometry")
        if not (0 <= addr.bank < self.n_banks and 0 <= addr.row < self.n_rows
                and 0 <= addr.column < self.config.row_size):
            raise AddressError(f"invalid DRAM address {addr}")
        fixed = (addr.row << self.config.row_shift) | addr.column
        return fixed | self._solver.solve(addr.bank ^ self.bank_of(fixed))

    def page_footprint(self, ppn: int) -> Tuple[Tuple[int, int], ...]:
        """Sorted (bank, row) pairs touched by the 4 KiB page"""
        cached = self._footprint_cache.get(ppn)
        if cached is not None:
            return cached
        base = ppn << PAGE_SHIFT
        seen = set()
        for pa in range(base, base + PAGE_SIZE, self._footprint_step):
            a = self.map_address(pa)
            seen.add((a.bank, a.row))
        result = tuple(sorted(seen))
        self._footprint_cache[ppn] = result
        return result

    def span_footprint(self, ppn: int, n_pages: int) -> Tuple[Tuple[int, int], ...]:
        if n_pages == 1:
            return self.page_footprint(ppn)
        seen = set()
        for p in range(ppn, ppn + n_pages):
            seen.update(self.page_footprint(p))
        return tuple(sorted(seen))

    def row_pages(self, bank: int, row: int) -> Tuple[int, ...]:
        """PPNs of the pages holding bytes of (bank, row)"""
        key = (bank, row)
        cached = self._row_pages_cache.get(key)
        if cached is not None:
            return cached
        rs = self.config.row_shift
        first = (row << rs) >> PAGE_SHIFT
        last = (((row + 1) << rs) - 1) >> PAGE_SHIFT
        result = tuple(p for p in range(first, last + 1) if key in self.page_footprint(p))
        self._row_pages_cache[key] = result
        return result

    # ------------------------------------------------------------------
    # Backing memory
    # ------------------------------------------------------------------
    @property
    def memory(self) -> bytearray:
        if self._memory is None:
            self._memory = bytearray(self.config.total_bytes)
        return self._memory

    def read_u64(self, pa: int) -> int:
        return int.from_bytes(self.memory[pa:pa + 8], 'little')

    def write_u64(self, pa: int, value: int):
        self.memory[pa:pa + 8] = value.to_bytes(8, 'little')

    def read_page(self, ppn: int) -> bytes:
        base = ppn << PAGE_SHIFT
        return bytes(self.memory[base:base + PAGE_SIZE])

    def write_page(self, ppn: int, data: bytes):
        base = ppn << PAGE_SHIFT
        self.memory[base:base + PAGE_SIZE] = data

    # ------------------------------------------------------------------
    # Activation and refresh
    # ------------------------------------------------------------------
    def activate(self, addr: DramAddress, now: int, force: bool = False) -> AccessOutcome:
        """
        Access one row.

        Args:
            addr: Target address
            now: Simulated time of the request
            force: Precharge first even if the row is already open

        Returns:
            AccessOutcome with latency (including any tRC wait) and flips
        """
        cfg = self.config
        bank, row = addr.bank, addr.row
        open_row = self.open_rows[bank]
        if open_row == row and not force:
            return AccessOutcome(cfg.latency_hit, (), False)

        start = max(now, self.last_act[bank] + cfg.t_rc)
        if open_row < 0:
            latency = cfg.latency_closed
        else:
            latency = cfg.latency_conflict
            self._recharge(bank, open_row, start)
        self.open_rows[bank] = row
        self.last_act[bank] = start
        self._recharge(bank, row, start)
        flips = self._disturb(bank, row, start)
        self.counters.activations += 1
        if self.trace is not None:
            self.trace.append((bank, row, start))
        if self.activation_observer is not None:
            self.activation_observer(bank, row, start)
        return AccessOutcome(start - now + latency, flips, True)

    def _recharge(self, bank: int, row: int, now: int):
        self.disturbance[bank, row] = 0.0
        self.last_recharge[bank, row] = now
        self.flipped[bank, row] = False

    def _disturb(self, bank: int, row: int, now: int) -> Tuple[FlipRecord, ...]:
        d = self.config.max_distance
        lo = max(0, row - d)
        hi = min(self.n_rows, row + d + 1)
        seg = self.disturbance[bank, lo:hi]
        seg += self._kernel[lo - row + d:hi - row + d]
        hot = (seg >= self.hc[bank, lo:hi]) & self.has_cells[bank, lo:hi] & ~self.flipped[bank, lo:hi]
        if not hot.any():
            return ()
        flips: List[FlipRecord] = []
        for idx in np.flatnonzero(hot):
            flips.extend(self._flip_row(bank, lo + int(idx), now))
        return tuple(flips)

    def _flip_row(self, bank: int, row: int, now: int) -> List[FlipRecord]:
        self.flipped[bank, row] = True
        memory = self.memory
        records = []
        for cell in self.cells.get((bank, row), ()):
            pa = self.compose(DramAddress(bank, row, cell.offset))
            old = (memory[pa] >> cell.bit) & 1
            if old != cell.direction:
                continue
            memory[pa] ^= 1 << cell.bit
            record = FlipRecord(bank, row, pa, cell.bit, old, old ^ 1, now)
            records.append(record)
            self.flip_log.append(record)
            for listener in self.flip_listeners:
                listener(record)
        return records

    def refresh_row(self, bank: int, row: int, now: int):
        """Recharge a single row"""
        self._recharge(bank, row, now)

    def auto_refresh_tick(self, now: int) -> List[Tuple[int, int]]:
        """Recharge every row and precharge every bank"""
        self.disturbance.fill(0.0)
        self.last_recharge.fill(now)
        self.flipped.fill(False)
        self.open_rows = [-1] * self.n_banks
        self.refresh_epoch += 1
        self.last_auto_refresh = now
        return [(b, r) for b in range(self.n_banks) for r in range(self.n_rows)]

    def attach(self, clock):
        clock.schedule_every('dram-auto-refresh', self.config.refresh_period,
                             lambda now: self.auto_refresh_tick(now),
                             priority=clock.PRIORITY_REFRESH)

    # ------------------------------------------------------------------
    # Vulnerability map
    # ------------------------------------------------------------------
    def seed_vulnerability(self, seed: int, flip_density: float):
        """
        Sample per-row hc and flippable cells from seed.

        Args:
            seed: RNG seed; equal seeds give bitwise-identical maps
            flip_density: Fraction of rows carrying flippable cells, in [0, 1]
        """
        if not 0.0 <= flip_density <= 1.0:
            raise ConfigError(f"flip_density must lie in [0, 1], got {flip_density}")
        cfg = self.config
        shape = (self.n_banks, self.n_rows)
        rng = np.random.default_rng(seed)
        self.hc = np.floor(cfg.hc_first * (1.0 + cfg.hc_spread * rng.random(shape)))
        vulnerable = rng.random(shape) < flip_density
        counts = rng.integers(1, 5, size=shape)
        offsets = rng.integers(0, cfg.row_size, size=shape + (4,))
        bits = rng.integers(0, 8, size=shape + (4,))
        directions = rng.integers(0, 2, size=shape + (4,))

        self.cells = {}
        if self.reversible:
            for bank, row in zip(*np.nonzero(vulnerable)):
                n = int(counts[bank, row])
                self.cells[(int(bank), int(row))] = [
                    Cell(int(offsets[bank, row, i]), int(bits[bank, row, i]), int(directions[bank, row, i]))
                    for i in range(n)
                ]
        self.has_cells = np.zeros(shape, dtype=bool)
        for bank, row in self.cells:
            self.has_cells[bank, row] = True
        self.flipped.fill(False)
        logger.info(f"Seeded vulnerability map: seed={seed} density={flip_density} "
                    f"vulnerable_rows={len(self.cells)}")

    def vulnerable_rows(self) -> List[Tuple[int, int]]:
        return sorted(self.cells)

    def row_state(self, bank: int, row: int) -> RowState:
        return RowState(
            disturbance=float(self.disturbance[bank, row]),
            last_recharge=int(self.last_recharge[bank, row]),
            open=self.open_rows[bank] == row,
            flippable_cells=list(self.cells.get((bank, row), [])),
            hc=float(self.hc[bank, row]),
            flipped=bool(self.flipped[bank, row]),
        )

    # ------------------------------------------------------------------
    # Steady-state bulk application
    # ------------------------------------------------------------------
    def block_delta(self, block: Tuple[Tuple[int, int], ...]) -> Dict[int, np.ndarray]:
        """
        Per-bank disturbance added by one replay of block to rows the block
        never activates. Activated rows are left at zero because they are
        recharged inside every replay.
        """
        cached = self._block_cache.get(block)
        if cached is not None:
            return cached
        d = self.config.max_distance
        deltas: Dict[int, np.ndarray] = {}
        activated: Dict[int, set] = {}
        for bank, row in block:
            delta = deltas.setdefault(bank, np.zeros(self.n_rows, dtype=np.float64))
            activated.setdefault(bank, set()).add(row)
            lo = max(0, row - d)
            hi = min(self.n_rows, row + d + 1)
            delta[lo:hi] += self._kernel[lo - row + d:hi - row + d]
        for bank, rows in activated.items():
            deltas[bank][list(rows)] = 0.0
        if len(self._block_cache) > 256:
            self._block_cache.clear()
        self._block_cache[block] = deltas
        return deltas

    def bulk_budget(self, deltas: Dict[int, np.ndarray]) -> int:
        """Largest replay count that keeps every armed cell row below its hc"""
        budget = None
        for bank, delta in deltas.items():
            mask = (delta > 0) & self.has_cells[bank] & ~self.flipped[bank]
            if not mask.any():
                continue
            headroom = (self.hc[bank][mask] - self.disturbance[bank][mask]) / delta[mask]
            n = int(np.ceil(headroom.min())) - 2
            budget = n if budget is None else min(budget, n)
        if budget is None:
            return 1 << 62
        return max(0, budget)

    def apply_bulk(self, block: Tuple[Tuple[int, int], ...], deltas: Dict[int, np.ndarray],
                   repeats: int, elapsed: int):
        """Account repeats further replays of block lasting elapsed ns each"""
        for bank, delta in deltas.items():
            self.disturbance[bank] += repeats * delta
            self.last_act[bank] += repeats * elapsed
        self.counters.activations += repeats * len(block)

    def shift_time(self, delta: int):
        self.last_recharge += delta
        self.last_act = [t + delta for t in self.last_act]
        self.last_auto_refresh += delta
