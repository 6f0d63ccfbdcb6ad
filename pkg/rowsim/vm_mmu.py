"""
MMU Module
4-level page-table walks, TLB, PTE/data cache residency, page-fault error
codes and the shadow copies used to check page-table integrity.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum, IntFlag
from typing import Callable, Dict, List, NamedTuple, Optional, Set, Tuple

from config import Config
from .dram import PAGE_SHIFT, PAGE_SIZE, DramModule
from .errors import AddressError, ContractError
from .metrics import RunCounters

logger = logging.getLogger(__name__)

PTE_PRESENT = 1 << 0
PTE_WRITABLE = 1 << 1
PTE_USER = 1 << 2
PTE_HUGE = 1 << 7
PTE_RSRV = 1 << 51
PTE_PPN_MASK = ((1 << 51) - 1) & ~(PAGE_SIZE - 1)

HUGE_SHIFT = 21
HUGE_SIZE = 1 << HUGE_SHIFT
VA_LIMIT = 1 << 48
LINE_SIZE = 64


class FaultErrorCode(IntFlag):
    P = 1 << 0
    WR = 1 << 1
    US = 1 << 2
    RSVD = 1 << 3
    ID = 1 << 4
    PK = 1 << 5
    SGX = 1 << 15


class AccessType(str, Enum):
    READ = 'read'
    WRITE = 'write'
    FETCH = 'fetch'


@dataclass
class PageTableEntry:
    """Decoded view of a 64-bit entry"""
    present: bool = False
    writable: bool = False
    user: bool = False
    huge: bool = False
    rsrv51: bool = False
    ppn: int = 0

    @classmethod
    def decode(cls, raw: int) -> 'PageTableEntry':
        return cls(
            present=bool(raw & PTE_PRESENT),
            writable=bool(raw & PTE_WRITABLE),
            user=bool(raw & PTE_USER),
            huge=bool(raw & PTE_HUGE),
            rsrv51=bool(raw & PTE_RSRV),
            ppn=(raw & PTE_PPN_MASK) >> PAGE_SHIFT,
        )

    def encode(self) -> int:
        raw = (self.ppn << PAGE_SHIFT) & PTE_PPN_MASK
        if self.present:
            raw |= PTE_PRESENT
        if self.writable:
            raw |= PTE_WRITABLE
        if self.user:
            raw |= PTE_USER
        if self.huge:
            raw |= PTE_HUGE
        if self.rsrv51:
            raw |= PTE_RSRV
        return raw


class PteRef(NamedTuple):
    """Location of one entry: table page, index, table level (1 = leaf table)"""
    table_ppn: int
    index: int
    level: int

    @property
    def pa(self) -> int:
        return (self.table_ppn << PAGE_SHIFT) | (self.index << 3)


class Fault(NamedTuple):
    code: FaultErrorCode
    va: int


class TlbEntry(NamedTuple):
    ppn: int
    level: int
    writable: bool
    user: bool
    pte_ref: PteRef


class TranslationResult(NamedTuple):
    pa: Optional[int]
    fault: Optional[Fault]
    latency: int
    pte_ref: Optional[PteRef]


class AccessResult(NamedTuple):
    ok: bool
    pa: Optional[int]
    latency: int
    fault: Optional[Fault]
    value: Optional[int] = None


@dataclass
class TranslationContext:
    """Address space of one process"""
    pid: int
    root_ppn: int
    tlb: Dict[Tuple[int, int], TlbEntry] = field(default_factory=dict)


def table_index(va: int, level: int) -> int:
    return (va >> (PAGE_SHIFT + 9 * (level - 1))) & 511


class Mmu:
    """
    Translation and memory access on top of a DramModule.

    pte_cache is a resident set of PTE physical addresses and data_cache a
    resident set of 64-byte lines; both only lose entries on explicit
    flushes.
    """

    def __init__(self, dram: DramModule, clock=None, counters: Optional[RunCounters] = None):
        self.dram = dram
        self.clock = clock
        self.counters = counters if counters is not None else dram.counters
        self.pte_cache: Set[int] = set()
        self.data_cache: Set[int] = set()
        self.shadow: Dict[int, bytearray] = {}
        self.fault_handler: Optional[Callable[[Fault, TranslationContext, int], bool]] = None
        self.cache_hit_latency = Config.CACHE_HIT_LATENCY

    # ------------------------------------------------------------------
    # Translation
    # ------------------------------------------------------------------
    def translate(self, ctx: TranslationContext, va: int, access: AccessType = AccessType.READ,
                  user: bool = True, now: int = 0) -> TranslationResult:
        """
        Translate va, walking the tables on a TLB miss.

        Every uncached PTE read activates DRAM at now plus the latency so
        far. Faults are returned, never raised.
        """
        if va < 0 or va >= VA_LIMIT:
            raise AddressError(f"non-canonical virtual address {va:#x}")
        access_bits = self._access_bits(access, user)

        entry = ctx.tlb.get((1, va >> PAGE_SHIFT)) or ctx.tlb.get((2, va >> HUGE_SHIFT))
        if entry is not None:
            denied = self._permission_fault(entry.writable, entry.user, access, user)
            if denied:
                return TranslationResult(None, Fault(FaultErrorCode.P | denied | access_bits, va),
                                         self.cache_hit_latency, entry.pte_ref)
            return TranslationResult(self._compose(entry.ppn, entry.level, va), None,
                                     self.cache_hit_latency, entry.pte_ref)

        dram = self.dram
        table = ctx.root_ppn
        latency = 0
        writable = user_ok = True
        for level in (4, 3, 2, 1):
            ref = PteRef(table, table_index(va, level), level)
            pte_pa = ref.pa
            if pte_pa in self.pte_cache:
                latency += self.cache_hit_latency
            else:
                outcome = dram.activate(dram.map_address(pte_pa), now + latency)
                latency += outcome.latency
                self.pte_cache.add(pte_pa)
            raw = dram.read_u64(pte_pa)
            if not raw & PTE_PRESENT:
                return TranslationResult(None, Fault(FaultErrorCode(access_bits), va), latency, ref)
            writable = writable and bool(raw & PTE_WRITABLE)
            user_ok = user_ok and bool(raw & PTE_USER)
            if level == 1 or (level == 2 and raw & PTE_HUGE):
                if raw & PTE_RSRV:
                    code = FaultErrorCode.P | FaultErrorCode.RSVD | access_bits
                    return TranslationResult(None, Fault(code, va), latency, ref)
                denied = self._permission_fault(writable, user_ok, access, user)
                if denied:
                    return TranslationResult(None, Fault(FaultErrorCode.P | denied | access_bits, va),
                                             latency, ref)
                ppn = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
                key = (1, va >> PAGE_SHIFT) if level == 1 else (2, va >> HUGE_SHIFT)
                ctx.tlb[key] = TlbEntry(ppn, level, writable, user_ok, ref)
                return TranslationResult(self._compose(ppn, level, va), None, latency, ref)
            table = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
        raise ContractError("walk ended without a leaf")  # unreachable

    @staticmethod
    def _compose(ppn: int, level: int, va: int) -> int:
        if level == 2:
            return (ppn << PAGE_SHIFT) | (va & (HUGE_SIZE - 1))
        return (ppn << PAGE_SHIFT) | (va & (PAGE_SIZE - 1))

    @staticmethod
    def _access_bits(access: AccessType, user: bool) -> int:
        bits = 0
        if access == AccessType.WRITE:
            bits |= FaultErrorCode.WR
        elif access == AccessType.FETCH:
            bits |= FaultErrorCode.ID
        if user:
            bits |= FaultErrorCode.US
        return bits

    @staticmethod
    def _permission_fault(writable: bool, user_ok: bool, access: AccessType, user: bool) -> int:
        if user and not user_ok:
            return FaultErrorCode.US
        if access == AccessType.WRITE and not writable:
            return FaultErrorCode.WR
        return 0

    # ------------------------------------------------------------------
    # PTE updates
    # ------------------------------------------------------------------
    def read_pte(self, ref: PteRef) -> int:
        return self.dram.read_u64(ref.pa)

    def write_pte(self, ref: PteRef, raw: int):
        """Legitimate kernel write: memory and shadow copy change together"""
        self.dram.write_u64(ref.pa, raw)
        shadow = self.shadow.get(ref.table_ppn)
        if shadow is not None:
            offset = ref.index << 3
            shadow[offset:offset + 8] = raw.to_bytes(8, 'little')

    def is_leaf(self, ref: PteRef) -> bool:
        if ref.level == 1:
            return True
        return ref.level == 2 and bool(self.read_pte(ref) & PTE_HUGE)

    def set_rsrv(self, ref: PteRef):
        if not self.is_leaf(ref):
            raise ContractError(f"rsrv bit only applies to leaf entries, got level {ref.level}")
        raw = self.read_pte(ref)
        if not raw & PTE_RSRV:
            self.write_pte(ref, raw | PTE_RSRV)

    def clear_rsrv(self, ref: PteRef):
        if not self.is_leaf(ref):
            raise ContractError(f"rsrv bit only applies to leaf entries, got level {ref.level}")
        raw = self.read_pte(ref)
        if raw & PTE_RSRV:
            self.write_pte(ref, raw & ~PTE_RSRV)

    # ------------------------------------------------------------------
    # Flushes
    # ------------------------------------------------------------------
    def tlb_flush(self, ctx: TranslationContext, va: int):
        ctx.tlb.pop((1, va >> PAGE_SHIFT), None)
        ctx.tlb.pop((2, va >> HUGE_SHIFT), None)

    def pte_cache_flush(self, pa: int):
        self.pte_cache.discard(pa & ~7)

    def data_cache_flush(self, pa: int):
        self.data_cache.discard(pa & ~(LINE_SIZE - 1))

    def flush_page_lines(self, ppn: int):
        """Drop every cached line and PTE of one physical page"""
        base = ppn << PAGE_SHIFT
        self.data_cache = {line for line in self.data_cache if line >> PAGE_SHIFT != ppn}
        self.pte_cache = {pa for pa in self.pte_cache if pa >> PAGE_SHIFT != ppn}
        logger.debug(f"Flushed cached lines of page {base:#x}")

    # ------------------------------------------------------------------
    # Shadow copies
    # ------------------------------------------------------------------
    def register_table(self, ppn: int):
        self.shadow[ppn] = bytearray(self.dram.read_page(ppn))

    def unregister_table(self, ppn: int):
        self.shadow.pop(ppn, None)

    def integrity_diff(self, ppn: int) -> List[Tuple[int, int, int]]:
        """(offset, expected byte, actual byte) for every corrupted byte"""
        shadow = self.shadow.get(ppn)
        if shadow is None:
            return []
        actual = self.dram.read_page(ppn)
        return [(i, shadow[i], actual[i]) for i in range(PAGE_SIZE) if shadow[i] != actual[i]]

    def corrupted_tables(self, ppns) -> List[int]:
        return [p for p in ppns if self.shadow.get(p) is not None
                and bytes(self.shadow[p]) != self.dram.read_page(p)]

    # ------------------------------------------------------------------
    # Memory access
    # ------------------------------------------------------------------
    def access_memory(self, ctx: TranslationContext, va: int, access: AccessType = AccessType.READ,
                      user: bool = True, now: Optional[int] = None, value: Optional[int] = None) -> AccessResult:
        """
        Translate and access one byte, advancing the clock as time passes.

        A fault goes to fault_handler; if it reports the fault resolved,
        fault_service_time is charged and the access is retried once.
        """
        clock = self.clock
        if now is not None and now > clock.now:
            clock.run_until(now)
        start = clock.now
        result = self.translate(ctx, va, access, user, clock.now)
        clock.advance(result.latency)
        if result.fault is not None:
            self.counters.faults += 1
            handler = self.fault_handler
            resolved = handler is not None and handler(result.fault, ctx, clock.now)
            if not resolved:
                return AccessResult(False, None, clock.now - start, result.fault)
            clock.advance(self.dram.config.fault_service_time)
            result = self.translate(ctx, va, access, user, clock.now)
            clock.advance(result.latency)
            if result.fault is not None:
                return AccessResult(False, None, clock.now - start, result.fault)

        pa = result.pa
        line = pa & ~(LINE_SIZE - 1)
        if line in self.data_cache:
            clock.advance(self.cache_hit_latency)
        else:
            outcome = self.dram.activate(self.dram.map_address(pa), clock.now)
            clock.advance(outcome.latency)
            self.data_cache.add(line)
        memory = self.dram.memory
        if access == AccessType.WRITE and value is not None:
            memory[pa] = value & 0xFF
        return AccessResult(True, pa, clock.now - start, None, memory[pa])
