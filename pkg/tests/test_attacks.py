from __future__ import annotations

import numpy as np
import pytest

from rowsim.attacks import (HammerPattern, discover_vulnerable_rows, find_victims, fuzz_patterns,
                            place_victim_tables, run_cattmew, run_hammer, run_memory_spray, run_pthammer)
from rowsim.errors import ScenarioError
from rowsim.harness import simulation_factory
from rowsim.os_kernel import PageRole

from conftest import scenario_for


@pytest.mark.parametrize('kind, rows', [
    ('double', [1]),
    ('single', [1, 2, 3]),
    ('one_location', [1, 2]),
    ('many', [1, 2]),
    ('many', [1, 1, 3]),
    ('triple', [1, 2, 3]),
])
def test_invalid_patterns(kind, rows):
    with pytest.raises(ValueError):
        HammerPattern(kind, 0, rows)


def test_pattern_builders():
    assert HammerPattern.double(0, 10).rows == [9, 11]
    assert HammerPattern.double(0, 10, distance=2).rows == [8, 12]
    assert HammerPattern.many(3, 10, 4, spacing=3).rows == [10, 13, 16, 19]
    single = HammerPattern.single(0, 100, np.random.default_rng(1))
    assert len(set(single.rows)) == 2 and all(0 <= r < 100 for r in single.rows)
    assert single.aggressors == [(0, r) for r in single.rows]


def test_zero_victims_is_a_noop(make_sim):
    sim = make_sim('none')
    report = run_memory_spray(sim, 0)
    assert report.victims == []
    assert not report.succeeded
    assert sim.counters.activations == 0


def test_too_many_victims(make_sim):
    with pytest.raises(ScenarioError):
        find_victims(make_sim('none'), 100_000, (-1, 1))


def test_victims_are_spaced_and_usable(make_sim):
    sim = make_sim('none')
    victims = find_victims(sim, 6, (-1, 1, 3))
    assert len({(v.bank, v.row) for v in victims}) == 6
    for v in victims:
        assert v.cell.direction == 0
        assert sim.dram.page_footprint(v.ppn) == ((v.bank, v.row),)
        others = [w.row for w in victims if w.bank == v.bank and w is not v]
        assert all(abs(v.row - r) > 14 for r in others)


def test_one_location_hammer_hits_the_row_buffer(make_sim):
    sim = make_sim('none')
    report = run_hammer(sim, HammerPattern.one_location(0, 300, duration=500_000))
    assert report.flips == []
    assert report.activations <= 5


def test_memory_spray_is_deterministic(make_sim):
    reports = [run_memory_spray(make_sim('none'), 2, duration=5_000_000) for _ in range(2)]
    assert reports[0] == reports[1]
    assert reports[0].succeeded
    assert reports[0].flips_in_pt_rows >= 2


def test_cattmew_buffer_pages_are_tracked(make_sim):
    sim = make_sim('softtrr')
    report = run_cattmew(sim, 1, duration=3_000_000)
    buffers = [p for p, info in sim.kernel.pages.items() if info.role == PageRole.KERNEL_BUFFER]
    assert len(buffers) == 2
    assert all(p in sim.defense.adj for p in buffers)
    assert report.flips_in_pt_rows == 0
    assert sim.counters.rsvd_faults > 0
    sim.check_exposure_bound()


def test_pthammer_needs_tlb_flushes(make_sim):
    report = run_pthammer(make_sim('none'), 1, duration=500_000, flush_tlb=False)
    assert report.flips_total == 0
    assert len(report.victims) == 1


def test_discovery_reports_only_flipping_rows(make_sim):
    sim = make_sim('none')
    victim = find_victims(sim, 1, (-1, 1))[0]
    quiet = next(r for r in range(victim.row + 20, sim.dram.n_rows - 70)
                 if (victim.bank, r) not in sim.dram.cells)
    assert discover_vulnerable_rows(sim, victim.bank, [victim.row, quiet]) == [victim.row]


def test_fuzzer_is_reproducible():
    factory = simulation_factory(scenario_for('none'))
    first = fuzz_patterns(factory, 1, 'none', seed=4)
    second = fuzz_patterns(factory, 1, 'none', seed=4)
    assert first.trials == second.trials
    trial = first.trials[0]
    assert 2 <= trial.n <= 32
    assert trial.spacing in (1, 2, 3)
    assert 4_000_000 <= trial.duration <= 32_000_000


def test_window_fast_forward_matches_exact_run(make_sim):
    results = []
    for fast_forward in (True, False):
        sim = make_sim('none')
        sim.settings.fast_forward = fast_forward
        victim = find_victims(sim, 1, (-1, 1))[0]
        pid = sim.kernel.spawn_process()
        place_victim_tables(sim, pid, [victim])
        report = run_hammer(sim, HammerPattern.double(victim.bank, victim.row, duration=400_000_000), pid)
        results.append((sim, report))
    (fast, fast_report), (exact, exact_report) = results
    assert fast_report.windows_skipped > 0
    assert exact_report.windows_skipped == 0
    assert len(fast_report.flips) == len(exact_report.flips) > 0
    a, b = fast.counters.snapshot(), exact.counters.snapshot()
    a.pop('activations')
    b.pop('activations')
    assert a == b
    assert fast.recorder.to_frame().equals(exact.recorder.to_frame())
