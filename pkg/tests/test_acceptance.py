"""
End-to-end runs on the default geometry: undefended attacks corrupt page
tables, the software defense keeps page-table rows intact and the
in-DRAM tracker falls to many-sided patterns.
"""
from __future__ import annotations

import pytest

from rowsim.attacks import (AGGRESSOR_BASE, HammerPattern, HammerSession, find_victims, fuzz_patterns,
                            place_pattern, place_victim_tables, run_attack, run_hammer)
from rowsim.harness import WORKLOAD_BASE, WORKLOAD_PAGES, emit_metrics, run_scenario, simulation_factory

from conftest import scenario_for

ATTACKS = ('memory_spray', 'cattmew', 'pthammer')


def _victim_setup(sim, offsets=(-1, 1)):
    victim = find_victims(sim, 1, offsets)[0]
    pid = sim.kernel.spawn_process()
    place_victim_tables(sim, pid, [victim])
    return victim, pid


def _first_flip(sim, victim):
    return next(f.time for f in sim.dram.flip_log if (f.bank, f.row) == (victim.bank, victim.row))


def _replayed_crossing(dram, victim, start_disturbance, open_row, log):
    """Time of the activation that lifts the victim row to its threshold, replayed from the trace"""
    v = victim.row
    level = start_disturbance
    threshold = dram.hc[victim.bank, v]
    for bank, row, t in log:
        if bank != victim.bank:
            continue
        if row == v or open_row == v:
            level = 0.0
        level += dram.config.weight(abs(row - v))
        open_row = row
        if level >= threshold:
            return t
    return None


def test_flip_time_matches_trace_replay(make_sim, monkeypatch):
    monkeypatch.setattr(HammerSession, '_steady', staticmethod(lambda previous, block: False))
    sim = make_sim('none')
    victim, pid = _victim_setup(sim)
    pattern = HammerPattern.double(victim.bank, victim.row, duration=2_500_000)
    steps = place_pattern(sim, pid, pattern, AGGRESSOR_BASE)
    start = float(sim.dram.disturbance[victim.bank, victim.row])
    open_row = sim.dram.open_rows[victim.bank]
    log = []
    sim.dram.activation_observer = lambda bank, row, t: log.append((bank, row, t))
    report = HammerSession(sim, steps, pattern.duration, fast_forward=False).run()

    assert report.flips_pt >= 1
    expected = _replayed_crossing(sim.dram, victim, start, open_row, log)
    assert expected is not None
    assert _first_flip(sim, victim) == expected


def test_bulk_replay_keeps_exact_flip_time(make_sim, monkeypatch):
    times = []
    for bulk in (True, False):
        with monkeypatch.context() as patch:
            if not bulk:
                patch.setattr(HammerSession, '_steady', staticmethod(lambda previous, block: False))
            sim = make_sim('none')
            victim, pid = _victim_setup(sim)
            report = run_hammer(sim, HammerPattern.double(victim.bank, victim.row, duration=2_500_000), pid)
            times.append((_first_flip(sim, victim), report.flips_pt))
    assert times[0] == times[1]


@pytest.mark.parametrize('attack', ATTACKS)
def test_attacks_flip_page_tables_without_defense(make_sim, attack):
    report = run_attack(make_sim('none'), attack, 3, duration=20_000_000)
    assert report.flips_in_pt_rows >= 3
    assert report.corrupted_tables >= 1


@pytest.mark.parametrize('attack', ATTACKS)
def test_softtrr_protects_page_tables(make_sim, attack):
    sim = make_sim('softtrr')
    report = run_attack(sim, attack, 3, duration=20_000_000)
    assert report.flips_in_pt_rows == 0
    assert all(v.hammer_ns >= 20_000_000 for v in report.victims)
    assert report.corrupted_tables == 0
    assert sim.counters.rsvd_faults > 0
    assert sim.counters.refreshes > 0
    sim.check_exposure_bound()


@pytest.mark.slow
@pytest.mark.parametrize('attack', ATTACKS)
def test_softtrr_protects_page_tables_at_scale(make_sim, attack):
    for defense in ('none', 'softtrr'):
        sim = make_sim(defense)
        report = run_attack(sim, attack, 50, duration=10_000_000_000)
        assert len(report.victims) == 50
        assert all(v.hammer_ns >= 10_000_000_000 for v in report.victims)
        if defense == 'none':
            assert report.flips_in_pt_rows > 0
        else:
            assert report.flips_in_pt_rows == 0
            sim.check_exposure_bound()


@pytest.mark.parametrize('budget', [3, pytest.param(500, marks=pytest.mark.slow)])
def test_fuzzed_patterns_respect_the_exposure_bound(budget):
    last = []
    factory = simulation_factory(scenario_for('softtrr'))

    def checked(seed):
        if last:
            last.pop().check_exposure_bound()
        last.append(factory(seed))
        return last[-1]

    report = fuzz_patterns(checked, budget, 'softtrr', seed=5)
    assert report.pt_hits == []
    last.pop().check_exposure_bound()


def test_chiptrr_stops_double_sided(make_sim):
    sim = make_sim('chiptrr')
    victim, pid = _victim_setup(sim)
    report = run_hammer(sim, HammerPattern.double(victim.bank, victim.row, duration=20_000_000), pid)
    assert report.flips == []
    assert sim.counters.trr_refreshes > 0


@pytest.mark.parametrize('defense, flips_expected', [('chiptrr', True), ('softtrr', False)])
def test_twelve_sided_pattern(make_sim, defense, flips_expected):
    offsets = tuple(range(-11, 12, 2))
    sim = make_sim(defense)
    victim, pid = _victim_setup(sim, offsets)
    pattern = HammerPattern.many(victim.bank, victim.row - 11, 12, spacing=2, duration=20_000_000)
    report = run_hammer(sim, pattern, pid)
    if flips_expected:
        assert report.flips_pt >= 1
        assert sim.counters.trr_refreshes == 0
    else:
        assert report.flips_pt == 0


@pytest.mark.slow
def test_fuzzer_defeats_chiptrr():
    report = fuzz_patterns(simulation_factory(scenario_for('chiptrr')), 200, 'chiptrr', seed=1)
    assert report.hits
    assert max(t.n for t in report.hits) >= 10


@pytest.mark.parametrize('max_distance, flips_expected', [(1, True), (6, False)])
def test_protection_distance(make_sim, max_distance, flips_expected):
    sim = make_sim('softtrr', dram=dict(weight_decay=0.7), max_distance=max_distance)
    victim, pid = _victim_setup(sim, (-2, 2))
    report = run_hammer(sim, HammerPattern.double(victim.bank, victim.row, distance=2, duration=8_000_000), pid)
    assert (report.flips_pt >= 1) == flips_expected


def test_benign_workload_triggers_no_defense_work(make_sim):
    sim = make_sim('softtrr')
    ctx = sim.kernel.processes[sim.workload_pid].ctx
    for _ in range(5):
        for i in range(WORKLOAD_PAGES):
            assert sim.mmu.access_memory(ctx, WORKLOAD_BASE + (i << 12)).ok
        sim.run_for(1_000_000)
    assert sim.counters.rsvd_faults == 0
    assert sim.counters.refreshes == 0


def test_scenario_runs_are_byte_identical(tmp_path):
    scenario = scenario_for('softtrr', attack=dict(scenario='memory_spray', m=1, duration=4_000_000))
    outputs = []
    for i in range(2):
        path = tmp_path / f'm{i}.csv'
        emit_metrics(run_scenario(scenario), str(path))
        outputs.append(path.read_bytes())
    assert outputs[0] == outputs[1]
