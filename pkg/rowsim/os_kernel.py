"""
Kernel Model
Processes, VMAs, page allocation, demand paging, the direct-physical map,
exact page placement and the hook points a defense attaches to.
"""
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Set, Tuple

import numpy as np

from .dram import PAGE_SHIFT, PAGE_SIZE, DramAddress
from .errors import AddressError, ContractError, OutOfMemoryError, PlacementError, SegmentationError
from .vm_mmu import (HUGE_SIZE, PTE_HUGE, PTE_PPN_MASK, PTE_PRESENT, PTE_USER,
                     PTE_WRITABLE, Fault, FaultErrorCode, Mmu, PteRef, TranslationContext, table_index)

logger = logging.getLogger(__name__)

DIRECT_MAP_BASE = 0xffff888000000000
PAGES_PER_HUGE = HUGE_SIZE // PAGE_SIZE


class PageRole(str, Enum):
    USER = 'user'
    PAGE_TABLE = 'page_table'
    KERNEL_BUFFER = 'kernel_buffer'


@dataclass
class PageInfo:
    role: PageRole
    pid: int
    level: int = 0  # table level for page-table pages


@dataclass
class TableInfo:
    pid: int
    level: int
    va_base: int
    parent: Optional[PteRef]


@dataclass
class Vma:
    start: int
    length: int
    writable: bool = True
    populate: bool = False
    huge: bool = False
    populated: Dict[int, int] = field(default_factory=dict)  # va page -> ppn

    @property
    def end(self) -> int:
        return self.start + self.length

    def contains(self, va: int) -> bool:
        return self.start <= va < self.end


@dataclass
class Process:
    pid: int
    ctx: TranslationContext
    vmas: List[Vma] = field(default_factory=list)
    tables: Set[int] = field(default_factory=set)

    def find_vma(self, va: int) -> Optional[Vma]:
        for vma in self.vmas:
            if vma.contains(va):
                return vma
        return None


@dataclass
class KernelHooks:
    """Callbacks fired by the kernel; page_fault handlers run in list order"""
    pte_alloc: List[Callable[[int], None]] = field(default_factory=list)
    free_pages: List[Callable[[int], None]] = field(default_factory=list)
    page_fault: List[Callable[[Fault, TranslationContext, int], bool]] = field(default_factory=list)
    new_user_page: List[Callable[[int, PteRef], None]] = field(default_factory=list)
    unmap: List[Callable[[int, int, int], None]] = field(default_factory=list)

    def on_pte_alloc(self, ppn: int):
        for hook in self.pte_alloc:
            hook(ppn)

    def on_free_pages(self, ppn: int):
        for hook in self.free_pages:
            hook(ppn)

    def on_new_user_page(self, ppn: int, ref: PteRef):
        for hook in self.new_user_page:
            hook(ppn, ref)

    def on_unmap(self, pid: int, va: int, ppn: int):
        for hook in self.unmap:
            hook(pid, va, ppn)


class PageAllocator:
    """
    Free map over every physical page with deterministic order.

    Policies:
        segregated: page tables from the top of memory, everything else
            from the bottom
        ascending: lowest free page for everything
    """

    POLICIES = ('segregated', 'ascending')

    def __init__(self, n_pages: int, policy: str = 'segregated'):
        if policy not in self.POLICIES:
            raise ValueError(f"unknown allocation policy: {policy}")
        self.n_pages = n_pages
        self.policy = policy
        self.free_map = np.ones(n_pages, dtype=bool)
        self.audit: List[Tuple[str, int]] = []

    @property
    def free_count(self) -> int:
        return int(self.free_map.sum())

    def is_free(self, ppn: int) -> bool:
        return bool(self.free_map[ppn])

    def alloc(self, kind: str = 'user') -> int:
        if not self.free_map.any():
            raise OutOfMemoryError("no free physical pages")
        if self.policy == 'segregated' and kind == 'table':
            ppn = self.n_pages - 1 - int(np.argmax(self.free_map[::-1]))
        else:
            ppn = int(np.argmax(self.free_map))
        self.claim(ppn)
        return ppn

    def alloc_contiguous(self, n_pages: int, align: int) -> int:
        """Lowest free run of n_pages starting on an align boundary"""
        for base in range(0, self.n_pages - n_pages + 1, align):
            if self.free_map[base:base + n_pages].all():
                for p in range(base, base + n_pages):
                    self.claim(p)
                return base
        raise OutOfMemoryError(f"no free aligned run of {n_pages} pages")

    def claim(self, ppn: int):
        if not self.free_map[ppn]:
            raise ContractError(f"page {ppn} is already allocated")
        self.free_map[ppn] = False
        self.audit.append(('alloc', ppn))

    def release(self, ppn: int):
        if self.free_map[ppn]:
            raise ContractError(f"double free of page {ppn}")
        self.free_map[ppn] = True
        self.audit.append(('free', ppn))


class Kernel:
    """
    Minimal kernel driving an Mmu.

    The reverse map is exact (ppn -> [(pid, va)]) and l1pt_rows counts the
    leaf page-table pages touching each (bank, row).
    """

    def __init__(self, mmu: Mmu, clock, policy: str = 'segregated'):
        self.mmu = mmu
        self.dram = mmu.dram
        self.clock = clock
        self.counters = mmu.counters
        self.allocator = PageAllocator(self.dram.config.total_bytes >> PAGE_SHIFT, policy)
        self.hooks = KernelHooks()
        self.processes: Dict[int, Process] = {}
        self.pages: Dict[int, PageInfo] = {}
        self.tables: Dict[int, TableInfo] = {}
        self.rmap: Dict[int, List[Tuple[int, int]]] = defaultdict(list)
        self.l1pt_rows: Dict[Tuple[int, int], int] = defaultdict(int)
        self.pinned: Set[int] = set()
        self._next_pid = 1
        mmu.fault_handler = self.handle_fault

    # ------------------------------------------------------------------
    # Processes and VMAs
    # ------------------------------------------------------------------
    def spawn_process(self, layout: Optional[List[Vma]] = None) -> int:
        """Create a process with the given VMAs; returns its pid"""
        pid = self._next_pid
        self._next_pid += 1
        proc = Process(pid, TranslationContext(pid, 0))
        self.processes[pid] = proc
        proc.ctx.root_ppn = self._alloc_table(proc, 4, None, 0)
        for vma in layout or []:
            self.mmap(pid, vma.start, vma.length, vma.writable, vma.populate, vma.huge)
        logger.debug(f"Spawned process {pid} with {len(proc.vmas)} VMAs")
        return pid

    def mmap(self, pid: int, start: int, length: int, writable: bool = True,
             populate: bool = False, huge: bool = False) -> Vma:
        proc = self.processes[pid]
        align = HUGE_SIZE if huge else PAGE_SIZE
        if start % align or length % align or length <= 0:
            raise ContractError(f"VMA {start:#x}+{length:#x} not aligned to {align:#x}")
        if start + length > 1 << 47:
            raise AddressError(f"VMA {start:#x}+{length:#x} outside user space")
        for vma in proc.vmas:
            if start < vma.end and vma.start < start + length:
                raise ContractError(f"VMA {start:#x}+{length:#x} overlaps {vma.start:#x}")
        vma = Vma(start, length, writable, populate, huge)
        proc.vmas.append(vma)
        proc.vmas.sort(key=lambda v: v.start)
        if populate:
            for va in range(start, start + length, align):
                self.demand_page(pid, va)
        return vma

    def demand_page(self, pid: int, va: int) -> int:
        """Map a fresh page at va (a whole huge page in huge VMAs); returns its ppn"""
        proc = self.processes[pid]
        vma = proc.find_vma(va)
        if vma is None:
            raise SegmentationError(f"pid {pid}: {va:#x} is outside every VMA")
        if vma.huge:
            va_page = va & ~(HUGE_SIZE - 1)
        else:
            va_page = va & ~(PAGE_SIZE - 1)
        existing = vma.populated.get(va_page)
        if existing is not None:
            return existing

        flags = PTE_PRESENT | PTE_USER | (PTE_WRITABLE if vma.writable else 0)
        if vma.huge:
            ref = self._walk_create(proc, va_page, 2)
            ppn = self.allocator.alloc_contiguous(PAGES_PER_HUGE, PAGES_PER_HUGE)
            for i in range(PAGES_PER_HUGE):
                self._zero(ppn + i)
                self.pages[ppn + i] = PageInfo(PageRole.USER, pid)
                self.rmap[ppn + i].append((pid, va_page + (i << PAGE_SHIFT)))
            self.mmu.write_pte(ref, (ppn << PAGE_SHIFT) | flags | PTE_HUGE)
        else:
            ref = self._walk_create(proc, va_page, 1)
            ppn = self.allocator.alloc('user')
            self._zero(ppn)
            self.pages[ppn] = PageInfo(PageRole.USER, pid)
            self.rmap[ppn].append((pid, va_page))
            self.mmu.write_pte(ref, (ppn << PAGE_SHIFT) | flags)
        vma.populated[va_page] = ppn
        self.hooks.on_new_user_page(ppn, ref)
        return ppn

    def map_existing(self, pid: int, va: int, ppn: int, writable: bool = True) -> PteRef:
        """Map an already allocated user page at another virtual address"""
        proc = self.processes[pid]
        vma = proc.find_vma(va)
        if vma is None or vma.huge:
            raise SegmentationError(f"pid {pid}: {va:#x} is not in a 4 KiB VMA")
        info = self.pages.get(ppn)
        if info is None or info.role == PageRole.PAGE_TABLE:
            raise ContractError(f"page {ppn} is not a mappable data page")
        va_page = va & ~(PAGE_SIZE - 1)
        if va_page in vma.populated:
            raise ContractError(f"pid {pid}: {va_page:#x} is already mapped")
        ref = self._walk_create(proc, va_page, 1)
        self.mmu.write_pte(ref, (ppn << PAGE_SHIFT) | PTE_PRESENT | PTE_USER
                           | (PTE_WRITABLE if writable and vma.writable else 0))
        vma.populated[va_page] = ppn
        self.rmap[ppn].append((pid, va_page))
        self.hooks.on_new_user_page(ppn, ref)
        return ref

    def map_kernel_buffer(self, pid: int, va: int, targets: List[int]) -> List[int]:
        """
        Kernel-owned buffer at exactly the given physical pages, mapped
        user-accessible at va (a driver buffer shared with user space).
        """
        proc = self.processes[pid]
        length = len(targets) << PAGE_SHIFT
        vma = proc.find_vma(va)
        if vma is None:
            vma = self.mmap(pid, va, length)
        for i, ppn in enumerate(targets):
            if ppn in self.pinned or not self.allocator.is_free(ppn):
                raise PlacementError(f"buffer page {ppn} is not free")
            self.allocator.claim(ppn)
            self._zero(ppn)
            self.pages[ppn] = PageInfo(PageRole.KERNEL_BUFFER, pid)
            va_page = va + (i << PAGE_SHIFT)
            ref = self._walk_create(proc, va_page, 1)
            self.mmu.write_pte(ref, (ppn << PAGE_SHIFT) | PTE_PRESENT | PTE_USER | PTE_WRITABLE)
            vma.populated[va_page] = ppn
            self.rmap[ppn].append((pid, va_page))
            self.hooks.on_new_user_page(ppn, ref)
        return list(targets)

    def unmap_page(self, pid: int, va: int):
        """Drop one mapping; frees the page when unreferenced and an emptied leaf table"""
        proc = self.processes[pid]
        vma = proc.find_vma(va)
        if vma is None:
            raise SegmentationError(f"pid {pid}: {va:#x} is outside every VMA")
        va_page = va & ~((HUGE_SIZE if vma.huge else PAGE_SIZE) - 1)
        ppn = vma.populated.pop(va_page, None)
        if ppn is None:
            return
        ref = self.leaf_pte(pid, va_page)
        self.mmu.write_pte(ref, 0)
        self.mmu.tlb_flush(proc.ctx, va_page)
        n = PAGES_PER_HUGE if vma.huge else 1
        for i in range(n):
            mappings = self.rmap.get(ppn + i, [])
            entry = (pid, va_page + (i << PAGE_SHIFT))
            if entry in mappings:
                mappings.remove(entry)
            if not mappings:
                self.rmap.pop(ppn + i, None)
                self.free_pages(ppn + i)
            else:
                self.hooks.on_unmap(pid, entry[1], ppn + i)
        if ref.level == 1 and not self._table_in_use(ref.table_ppn):
            self._free_table(ref.table_ppn)

    def exit_process(self, pid: int):
        proc = self.processes[pid]
        for vma in list(proc.vmas):
            for va_page in sorted(vma.populated):
                self.unmap_page(pid, va_page)
        for ppn in sorted(proc.tables, key=lambda p: self.tables[p].level):
            self._free_table(ppn)
        del self.processes[pid]
        logger.debug(f"Process {pid} exited")

    # ------------------------------------------------------------------
    # Pages
    # ------------------------------------------------------------------
    def free_pages(self, ppn: int):
        """Unmap ppn from every owner and return it to the allocator"""
        if self.allocator.is_free(ppn):
            raise ContractError(f"double free of page {ppn}")
        info = self.pages.get(ppn)
        if info is not None and info.role == PageRole.PAGE_TABLE:
            if self._table_in_use(ppn):
                raise ContractError(f"page table {ppn} still has present entries")
            self._free_table(ppn)
            return
        for pid, va in list(self.rmap.pop(ppn, [])):
            proc = self.processes.get(pid)
            ref = self.leaf_pte(pid, va)
            if proc is None or ref is None:
                continue
            self.mmu.write_pte(ref, 0)
            self.mmu.tlb_flush(proc.ctx, va)
            vma = proc.find_vma(va)
            if vma is not None:
                vma.populated.pop(va & ~((HUGE_SIZE if vma.huge else PAGE_SIZE) - 1), None)
        self.pages.pop(ppn, None)
        self.pinned.discard(ppn)
        self.mmu.flush_page_lines(ppn)
        self.hooks.on_free_pages(ppn)
        self.allocator.release(ppn)

    def pin(self, ppn: int):
        self.pinned.add(ppn)

    def place_page_exact(self, ppn_target: int, role: str, source_ppn: int):
        """
        Move a leaf page table ('l1pt') or a user page ('user') onto
        ppn_target, rewriting every entry that references it. A user page
        already at the target is swapped into the source frame.
        """
        if role not in ('l1pt', 'user'):
            raise ContractError(f"unknown placement role: {role}")
        if ppn_target == source_ppn:
            return
        src_info = self.pages.get(source_ppn)
        if role == 'l1pt' and (src_info is None or src_info.role != PageRole.PAGE_TABLE or src_info.level != 1):
            raise ContractError(f"page {source_ppn} is not a leaf page table")
        if role == 'user' and (src_info is None or src_info.role != PageRole.USER):
            raise ContractError(f"page {source_ppn} is not a user page")
        if ppn_target in self.pinned:
            raise PlacementError(f"target page {ppn_target} is pinned")

        target_info = self.pages.get(ppn_target)
        if target_info is not None and target_info.role != PageRole.USER:
            raise PlacementError(f"target page {ppn_target} holds a {target_info.role.value} page")
        target_mappings = list(self.rmap.pop(ppn_target, [])) if target_info is not None else []

        src_data = self.dram.read_page(source_ppn)
        if target_info is None:
            self.allocator.claim(ppn_target)
            self.dram.write_page(ppn_target, src_data)
        else:
            self.dram.write_page(source_ppn, self.dram.read_page(ppn_target))
            self.dram.write_page(ppn_target, src_data)
        self._touch_rows(ppn_target)
        self.mmu.flush_page_lines(ppn_target)
        self.mmu.flush_page_lines(source_ppn)

        if role == 'l1pt':
            self._retarget_table(source_ppn, ppn_target)
        else:
            self._retarget_user(source_ppn, ppn_target, self.rmap.pop(source_ppn, []), src_info)
        if target_info is not None:
            self._retarget_user(ppn_target, source_ppn, target_mappings, target_info, swapped=True)
        else:
            self.allocator.release(source_ppn)

        self.hooks.on_free_pages(source_ppn)
        if target_info is not None:
            self.hooks.on_free_pages(ppn_target)
        if role == 'l1pt':
            self.hooks.on_pte_alloc(ppn_target)
        else:
            self._announce_user_page(ppn_target)
        if target_info is not None:
            self._announce_user_page(source_ppn)
        logger.debug(f"Placed {role} page {source_ppn} at {ppn_target}"
                     f"{' (swapped)' if target_info is not None else ''}")

    def _retarget_table(self, old: int, new: int):
        info = self.tables.pop(old)
        proc = self.processes[info.pid]
        self.mmu.write_pte(info.parent, (self.mmu.read_pte(info.parent) & ~PTE_PPN_MASK) | (new << PAGE_SHIFT))
        self.tables[new] = info
        self.pages[new] = self.pages.pop(old)
        proc.tables.discard(old)
        proc.tables.add(new)
        self.mmu.unregister_table(old)
        self.mmu.register_table(new)
        self._census(old, -1)
        self._census(new, +1)
        proc.ctx.tlb.clear()

    def _retarget_user(self, old: int, new: int, mappings, info: PageInfo, swapped: bool = False):
        for pid, va in mappings:
            proc = self.processes[pid]
            ref = self.leaf_pte(pid, va)
            self.mmu.write_pte(ref, (self.mmu.read_pte(ref) & ~PTE_PPN_MASK) | (new << PAGE_SHIFT))
            self.mmu.tlb_flush(proc.ctx, va)
            vma = proc.find_vma(va)
            vma.populated[va] = new
        if not swapped:
            self.pages.pop(old, None)
        self.pages[new] = info
        self.rmap[new] = list(mappings)

    def _announce_user_page(self, ppn: int):
        for pid, va in self.rmap.get(ppn, []):
            ref = self.leaf_pte(pid, va)
            if ref is not None:
                self.hooks.on_new_user_page(ppn, ref)

    # ------------------------------------------------------------------
    # Faults
    # ------------------------------------------------------------------
    def handle_fault(self, fault: Fault, ctx: TranslationContext, now: int) -> bool:
        """Defense handlers first, then demand paging for non-present faults"""
        if fault.code & FaultErrorCode.RSVD:
            self.counters.rsvd_faults += 1
        for handler in self.hooks.page_fault:
            if handler(fault, ctx, now):
                return True
        if not fault.code & FaultErrorCode.P:
            try:
                self.demand_page(ctx.pid, fault.va)
                return True
            except SegmentationError as e:
                logger.warning(f"Unresolved fault: {e}")
                return False
        return False

    # ------------------------------------------------------------------
    # Direct-physical map
    # ------------------------------------------------------------------
    def direct_map(self, pa: int) -> int:
        if pa < 0 or pa >= self.dram.config.total_bytes:
            raise AddressError(f"physical address {pa:#x} outside memory")
        return DIRECT_MAP_BASE + pa

    def direct_unmap(self, kva: int) -> int:
        pa = kva - DIRECT_MAP_BASE
        if pa < 0 or pa >= self.dram.config.total_bytes:
            raise AddressError(f"{kva:#x} is not a direct-map address")
        return pa

    def kernel_read(self, kva: int, now: int) -> int:
        """Read one byte through the direct map; a cached line skips DRAM"""
        pa = self.direct_unmap(kva)
        line = pa & ~63
        if line not in self.mmu.data_cache:
            self.dram.activate(self.dram.map_address(pa), now, force=True)
            self.mmu.data_cache.add(line)
        return self.dram.memory[pa]

    # ------------------------------------------------------------------
    # Table walking
    # ------------------------------------------------------------------
    def leaf_pte(self, pid: int, va: int) -> Optional[PteRef]:
        """Present leaf entry mapping va, found without touching DRAM timing"""
        proc = self.processes.get(pid)
        if proc is None:
            return None
        table = proc.ctx.root_ppn
        read = self.dram.read_u64
        for level in (4, 3, 2, 1):
            ref = PteRef(table, table_index(va, level), level)
            raw = read(ref.pa)
            if not raw & PTE_PRESENT:
                return None
            if level == 1 or (level == 2 and raw & PTE_HUGE):
                return ref
            table = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
        return None

    def leaf_table_of(self, pid: int, va: int) -> Optional[int]:
        """Leaf table page holding the mapping of va (None for huge mappings)"""
        ref = self.leaf_pte(pid, va)
        if ref is None or ref.level != 1:
            return None
        return ref.table_ppn

    def table_entries(self, ppn: int) -> List[Tuple[int, int]]:
        """(va, mapped ppn) of every present entry of a leaf table"""
        info = self.tables[ppn]
        raws = np.frombuffer(self.dram.read_page(ppn), dtype='<u8')
        present = np.flatnonzero(raws & PTE_PRESENT)
        return [(info.va_base + (int(i) << PAGE_SHIFT), int((int(raws[i]) & PTE_PPN_MASK) >> PAGE_SHIFT))
                for i in present]

    def leaf_tables(self) -> List[int]:
        return sorted(p for p, info in self.tables.items() if info.level == 1)

    def is_pt_row(self, bank: int, row: int) -> bool:
        return self.l1pt_rows.get((bank, row), 0) > 0

    def _walk_create(self, proc: Process, va: int, leaf_level: int) -> PteRef:
        table = proc.ctx.root_ppn
        for level in (4, 3, 2):
            ref = PteRef(table, table_index(va, level), level)
            if level == leaf_level:
                return ref
            raw = self.mmu.read_pte(ref)
            if raw & PTE_PRESENT:
                if raw & PTE_HUGE:
                    raise ContractError(f"{va:#x} is already covered by a huge mapping")
                table = (raw & PTE_PPN_MASK) >> PAGE_SHIFT
                continue
            child_level = level - 1
            span = 1 << (PAGE_SHIFT + 9 * child_level)
            child = self._alloc_table(proc, child_level, ref, va & ~(span - 1))
            self.mmu.write_pte(ref, (child << PAGE_SHIFT) | PTE_PRESENT | PTE_WRITABLE | PTE_USER)
            if child_level == 1:
                self.hooks.on_pte_alloc(child)
            table = child
        return PteRef(table, table_index(va, 1), 1)

    def _alloc_table(self, proc: Process, level: int, parent: Optional[PteRef], va_base: int) -> int:
        ppn = self.allocator.alloc('table')
        self._zero(ppn)
        self.pages[ppn] = PageInfo(PageRole.PAGE_TABLE, proc.pid, level)
        self.tables[ppn] = TableInfo(proc.pid, level, va_base, parent)
        proc.tables.add(ppn)
        self.mmu.register_table(ppn)
        if level == 1:
            self._census(ppn, +1)
        return ppn

    def _free_table(self, ppn: int):
        info = self.tables.pop(ppn)
        proc = self.processes.get(info.pid)
        if info.parent is not None and info.parent.table_ppn in self.tables:
            self.mmu.write_pte(info.parent, 0)
        if proc is not None:
            proc.tables.discard(ppn)
            proc.ctx.tlb.clear()
        if info.level == 1:
            self._census(ppn, -1)
        self.mmu.unregister_table(ppn)
        self.mmu.flush_page_lines(ppn)
        self.pages.pop(ppn, None)
        self.hooks.on_free_pages(ppn)
        self.allocator.release(ppn)

    def _table_in_use(self, ppn: int) -> bool:
        raws = np.frombuffer(self.dram.read_page(ppn), dtype='<u8')
        return bool((raws & PTE_PRESENT).any())

    def _census(self, ppn: int, delta: int):
        for key in self.dram.page_footprint(ppn):
            self.l1pt_rows[key] += delta
            if self.l1pt_rows[key] <= 0:
                del self.l1pt_rows[key]

    def _zero(self, ppn: int):
        self.dram.write_page(ppn, bytes(PAGE_SIZE))

    def _touch_rows(self, ppn: int):
        """Writing a whole page opens each of its rows once"""
        for bank, row in self.dram.page_footprint(ppn):
            self.dram.activate(DramAddress(bank, row, 0), self.clock.now, force=True)
