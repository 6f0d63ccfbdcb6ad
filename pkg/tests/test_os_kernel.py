from __future__ import annotations

import pytest

from rowsim.dram import PAGE_SIZE
from rowsim.errors import AddressError, ContractError, OutOfMemoryError, PlacementError, SegmentationError
from rowsim.os_kernel import DIRECT_MAP_BASE, PageAllocator, Vma
from rowsim.vm_mmu import HUGE_SIZE, PTE_PPN_MASK

VA = 0x400000


def test_allocator_policies():
    alloc = PageAllocator(8, 'segregated')
    assert alloc.alloc('table') == 7
    assert alloc.alloc('user') == 0
    assert alloc.alloc_contiguous(2, 2) == 2
    assert alloc.free_count == 4
    alloc.release(0)
    with pytest.raises(ContractError):
        alloc.release(0)
    assert PageAllocator(8, 'ascending').alloc('table') == 0
    with pytest.raises(ValueError):
        PageAllocator(8, 'random')


def test_allocator_exhaustion():
    alloc = PageAllocator(2)
    alloc.alloc()
    alloc.alloc()
    with pytest.raises(OutOfMemoryError):
        alloc.alloc()


def test_full_region_uses_one_leaf_table(make_system):
    kernel = make_system().kernel
    pid = kernel.spawn_process([Vma(HUGE_SIZE, HUGE_SIZE, populate=True)])
    tables = kernel.leaf_tables()
    assert len(tables) == 1
    entries = kernel.table_entries(tables[0])
    assert len(entries) == 512
    assert [va for va, _ in entries] == [HUGE_SIZE + i * PAGE_SIZE for i in range(512)]
    assert kernel.leaf_table_of(pid, HUGE_SIZE + 0x5000) == tables[0]


def test_empty_layout_has_root_only(make_system):
    kernel = make_system().kernel
    pid = kernel.spawn_process()
    proc = kernel.processes[pid]
    assert proc.tables == {proc.ctx.root_ppn}
    assert kernel.leaf_tables() == []


def test_processes_own_disjoint_frames(make_system):
    kernel = make_system().kernel
    owned = []
    for _ in range(2):
        pid = kernel.spawn_process([Vma(VA, 4 * PAGE_SIZE, populate=True)])
        proc = kernel.processes[pid]
        owned.append(set(proc.tables) | set(proc.vmas[0].populated.values()))
    assert not owned[0] & owned[1]


def test_demand_paging(make_system):
    kernel = make_system().kernel
    pid = kernel.spawn_process([Vma(VA, 4 * PAGE_SIZE)])
    ppn = kernel.demand_page(pid, VA + 0x123)
    assert kernel.demand_page(pid, VA) == ppn
    assert kernel.rmap[ppn] == [(pid, VA)]
    with pytest.raises(SegmentationError):
        kernel.demand_page(pid, 0x900000)


def test_freed_frame_is_reused(make_system):
    kernel = make_system().kernel
    pid = kernel.spawn_process([Vma(VA, 4 * PAGE_SIZE, populate=True)])
    ppn = kernel.processes[pid].vmas[0].populated[VA + PAGE_SIZE]
    kernel.free_pages(ppn)
    assert kernel.leaf_pte(pid, VA + PAGE_SIZE) is None
    with pytest.raises(ContractError):
        kernel.free_pages(ppn)
    assert kernel.demand_page(pid, VA + PAGE_SIZE) == ppn


def test_direct_map(make_system):
    system = make_system()
    kernel = system.kernel
    assert kernel.direct_map(0x1000) == DIRECT_MAP_BASE + 0x1000
    assert kernel.direct_unmap(kernel.direct_map(0x1000)) == 0x1000
    with pytest.raises(AddressError):
        kernel.direct_map(system.dram.config.total_bytes)
    with pytest.raises(AddressError):
        kernel.direct_unmap(0x1000)


def test_kernel_read_recharges_row(make_system):
    system = make_system()
    pa = 400 << 12
    bank, row, _ = system.dram.map_address(pa)
    system.dram.disturbance[bank, row] = 15
    system.dram.memory[pa] = 0x42
    assert system.kernel.kernel_read(system.kernel.direct_map(pa), 0) == 0x42
    assert system.dram.disturbance[bank, row] == 0


def test_place_leaf_table(make_system):
    system = make_system()
    kernel, mmu = system.kernel, system.mmu
    pid = kernel.spawn_process([Vma(VA, PAGE_SIZE, populate=True)])
    ctx = kernel.processes[pid].ctx
    before = mmu.translate(ctx, VA).pa
    old = kernel.leaf_table_of(pid, VA)
    assert old == 1020

    kernel.place_page_exact(400, 'l1pt', old)
    assert kernel.leaf_table_of(pid, VA) == 400
    assert kernel.allocator.is_free(old)
    assert 400 in mmu.shadow and old not in mmu.shadow
    assert kernel.is_pt_row(0, 100)
    assert not kernel.is_pt_row(0, 255)
    assert mmu.translate(ctx, VA).pa == before
    assert mmu.integrity_diff(400) == []

    kernel.place_page_exact(400, 'l1pt', 400)
    assert kernel.leaf_table_of(pid, VA) == 400


def test_placement_errors(make_system):
    kernel = make_system().kernel
    pid = kernel.spawn_process([Vma(VA, PAGE_SIZE, populate=True)])
    table = kernel.leaf_table_of(pid, VA)
    kernel.pin(500)
    with pytest.raises(PlacementError):
        kernel.place_page_exact(500, 'l1pt', table)
    with pytest.raises(PlacementError):
        kernel.place_page_exact(kernel.processes[pid].ctx.root_ppn, 'l1pt', table)
    with pytest.raises(ContractError):
        kernel.place_page_exact(501, 'l2pt', table)
    with pytest.raises(ContractError):
        kernel.place_page_exact(501, 'user', table)


def test_user_pages_swap(make_system):
    system = make_system()
    kernel, dram = system.kernel, system.dram
    pid = kernel.spawn_process([Vma(VA, 2 * PAGE_SIZE, populate=True)])
    a, b = VA, VA + PAGE_SIZE
    assert kernel.processes[pid].vmas[0].populated == {a: 0, b: 1}
    dram.write_page(0, b'\xaa' * PAGE_SIZE)
    dram.write_page(1, b'\xbb' * PAGE_SIZE)

    kernel.place_page_exact(1, 'user', 0)
    ppn_of = {va: (kernel.mmu.read_pte(kernel.leaf_pte(pid, va)) & PTE_PPN_MASK) >> 12 for va in (a, b)}
    assert ppn_of == {a: 1, b: 0}
    assert dram.read_page(1) == b'\xaa' * PAGE_SIZE
    assert dram.read_page(0) == b'\xbb' * PAGE_SIZE
    assert kernel.rmap[1] == [(pid, a)]
    assert kernel.rmap[0] == [(pid, b)]


def test_pte_alloc_hook_sees_every_leaf_table(make_system):
    kernel = make_system().kernel
    seen = []
    kernel.hooks.pte_alloc.append(seen.append)
    kernel.spawn_process([Vma(VA, PAGE_SIZE, populate=True), Vma(8 * HUGE_SIZE, 2 * PAGE_SIZE, populate=True)])
    assert sorted(seen) == kernel.leaf_tables()
    assert len(seen) == 2


def test_fault_hooks_run_before_demand_paging(make_system):
    system = make_system()
    kernel = system.kernel
    pid = kernel.spawn_process([Vma(VA, PAGE_SIZE)])
    vma = kernel.processes[pid].vmas[0]
    seen = []
    kernel.hooks.page_fault.append(lambda fault, ctx, now: seen.append(dict(vma.populated)) or False)
    assert system.mmu.access_memory(kernel.processes[pid].ctx, VA).ok
    assert seen == [{}]
    assert VA in vma.populated


def test_unmap_frees_emptied_leaf_table(make_system):
    kernel = make_system().kernel
    freed = []
    kernel.hooks.free_pages.append(freed.append)
    pid = kernel.spawn_process([Vma(VA, PAGE_SIZE, populate=True)])
    table = kernel.leaf_table_of(pid, VA)
    ppn = kernel.processes[pid].vmas[0].populated[VA]
    kernel.unmap_page(pid, VA)
    assert kernel.leaf_tables() == []
    assert freed == [ppn, table]
    assert ppn not in kernel.rmap
    assert kernel.allocator.is_free(table)


def test_exit_releases_everything(make_system):
    kernel = make_system().kernel
    free = kernel.allocator.free_count
    pid = kernel.spawn_process([Vma(VA, 8 * PAGE_SIZE, populate=True)])
    assert kernel.allocator.free_count == free - 12
    kernel.exit_process(pid)
    assert kernel.allocator.free_count == free
    assert kernel.pages == {} and kernel.tables == {}
    assert kernel.l1pt_rows == {}
    assert pid not in kernel.processes


def test_unmap_hook_fires_only_while_the_page_stays_mapped(make_system):
    kernel = make_system().kernel
    calls, freed = [], []
    kernel.hooks.unmap.append(lambda pid, va, ppn: calls.append((pid, va, ppn)))
    kernel.hooks.free_pages.append(freed.append)
    pid = kernel.spawn_process([Vma(VA, PAGE_SIZE, populate=True), Vma(VA + 0x10000, PAGE_SIZE)])
    ppn = kernel.processes[pid].vmas[0].populated[VA]
    kernel.map_existing(pid, VA + 0x10000, ppn)

    kernel.unmap_page(pid, VA)
    assert calls == [(pid, VA, ppn)]
    assert freed == []
    kernel.unmap_page(pid, VA + 0x10000)
    assert calls == [(pid, VA, ppn)]
    assert ppn in freed
