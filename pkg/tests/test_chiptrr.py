from __future__ import annotations

import numpy as np

from rowsim.chiptrr import ChipTrr, TrackerTable
from rowsim.dram import DramAddress, DramModule
from rowsim.metrics import RunCounters


def _hammer(dram, rows, rounds, now=0):
    for _ in range(rounds):
        for row in rows:
            now += dram.activate(DramAddress(0, row, 0), now).latency
    return now


def test_tracker_counts_and_decrements():
    table = TrackerTable(2, 100)
    for row in (1, 1, 2):
        table.observe(row)
    assert table.entries == {1: 2, 2: 1}
    assert table.observe(3) is None
    assert table.state() == ((1, 1),)


def test_tracker_reports_threshold_once():
    table = TrackerTable(2, 3)
    assert table.observe(7) is None
    assert table.observe(7) is None
    assert table.observe(7) == 7
    assert 7 not in table.entries


def test_zero_slots_track_nothing():
    table = TrackerTable(0, 1)
    assert table.observe(5) is None
    assert table.entries == {}


def test_double_sided_pattern_is_caught(dram_config, plant):
    counters = RunCounters()
    dram = DramModule(dram_config(hc_first=200), counters)
    plant(dram, 0, 5)
    trr = ChipTrr(dram, k=4, threshold=50)
    _hammer(dram, (4, 6), 500)
    assert dram.flip_log == []
    assert counters.trr_refreshes > 0
    assert trr.state()[0] != ()


def test_many_sided_rotation_evades_small_tracker(dram_config, plant):
    counters = RunCounters()
    dram = DramModule(dram_config(max_distance=1, weight_decay=1.0, hc_first=200), counters)
    plant(dram, 0, 11)
    ChipTrr(dram, k=2, threshold=50)
    _hammer(dram, (10, 12, 14, 16, 18), 200)
    assert counters.trr_refreshes == 0
    assert [(r.bank, r.row) for r in dram.flip_log] == [(0, 11)]


def test_disabled_tracker_leaves_disturbance_untouched(dram_config):
    plain = DramModule(dram_config(hc_first=10 ** 9))
    tracked = DramModule(dram_config(hc_first=10 ** 9))
    ChipTrr(tracked, k=0, threshold=1)
    _hammer(plain, (4, 6, 9), 300)
    _hammer(tracked, (4, 6, 9), 300)
    assert np.array_equal(plain.disturbance, tracked.disturbance)


def test_window_reset_is_idempotent(dram_config):
    dram = DramModule(dram_config())
    trr = ChipTrr(dram, k=4, threshold=1000)
    _hammer(dram, (4, 6), 20)
    trr.reset_on_refresh_window()
    trr.reset_on_refresh_window()
    assert trr.state() == ((), ())


def test_bulk_budget_follows_linear_growth(dram_config):
    trr = ChipTrr(DramModule(dram_config()), k=4, threshold=50)
    before = (((4, 1), (6, 1)), ())
    after = (((4, 2), (6, 2)), ())
    assert trr.bulk_budget(before, after) == 46
    assert trr.bulk_budget(after, after) == 1 << 62
    assert trr.bulk_budget(before, (((4, 2), (8, 1)), ())) == 0
    assert trr.bulk_budget(after, before) == 0

    trr.tables[0].entries = {4: 2, 6: 2}
    trr.apply_bulk(before, after, 10)
    assert trr.tables[0].entries == {4: 12, 6: 12}
