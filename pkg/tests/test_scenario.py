from __future__ import annotations

from pathlib import Path

import pytest

from rowsim.errors import ConfigError
from rowsim.scenario import ScenarioConfig, load_scenario, parse_scenario, with_overrides

SCENARIO_DIR = Path(__file__).resolve().parents[1] / 'scenarios'


def test_parse_values():
    scenario = parse_scenario("""
# comment before the first section
[dram]
bank_fns = 0x22000, 0x44000, 0x88000
hc_first = 25_000

[defense]
mode = chiptrr
chiptrr_k = 2

[attack]
pattern = double
duration = 0x1000
fast_forward = no

[output]
format = json
""")
    assert scenario.dram.bank_fns == [0x22000, 0x44000, 0x88000]
    assert scenario.dram.hc_first == 25_000
    assert scenario.defense.mode == 'chiptrr'
    assert scenario.defense.chiptrr_k == 2
    assert scenario.attack.duration == 4096
    assert scenario.attack.fast_forward is False
    assert scenario.output.format == 'json'
    assert scenario.defense.timer_inr == ScenarioConfig().defense.timer_inr


def test_empty_file_is_the_default_scenario():
    scenario = parse_scenario('')
    assert scenario.defense.mode == 'softtrr'
    assert scenario.attack.scenario == 'none'


@pytest.mark.parametrize('text, message', [
    ("[dram]\nbanks = 8\n", "unknown key 'banks'"),
    ("[network]\nport = 1\n", "unknown section"),
    ("[defense]\ncount_limit = 1\n", "count_limit must be no less than 2"),
    ("[defense]\ntimer_inr = 2_000_000\n", "exceeds"),
    ("[output]\nformat = xml\n", "csv or json"),
    ("[dram]\nhc_first = many\n", "cannot parse"),
    ("[attack]\nfast_forward = maybe\n", "cannot parse"),
    ("[attack]\nscenario = rowpress\n", "attack.scenario"),
    ("[dram]\nbank_fns = 0x2000, 0x2000\n", "dram.bank_fns"),
    ("no section header\n", "<string>"),
])
def test_invalid_scenarios(text, message):
    with pytest.raises(ConfigError, match=message):
        parse_scenario(text)


def test_timer_bound_allows_a_longer_interval_with_fewer_counts():
    scenario = parse_scenario("[defense]\ntimer_inr = 500_000\ncount_limit = 3\n")
    assert scenario.defense.count_limit == 3


def test_timer_bound_ignored_without_softtrr():
    assert parse_scenario("[defense]\nmode = none\ncount_limit = 1\n").defense.mode == 'none'


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match='not found'):
        load_scenario(str(tmp_path / 'absent.ini'))


@pytest.mark.parametrize('path', sorted(SCENARIO_DIR.glob('*.ini')), ids=lambda p: p.stem)
def test_bundled_scenarios_load(path):
    scenario = load_scenario(str(path))
    assert scenario.source == str(path)
    assert scenario.output.metrics.startswith('output/')


def test_overrides_copy_the_scenario():
    base = ScenarioConfig()
    result = with_overrides(base, defense='none', m=3, seed=9, duration_ms=2.5, fmt='json',
                            metrics='x.json', attack='pthammer')
    assert base.defense.mode == 'softtrr'
    assert base.attack.m == 50
    assert result.defense.mode == 'none'
    assert result.attack.m == 3
    assert result.attack.seed == 9
    assert result.attack.duration == 2_500_000
    assert result.attack.scenario == 'pthammer'
    assert (result.output.metrics, result.output.format) == ('x.json', 'json')
    assert result.dram is not base.dram


def test_invalid_override():
    with pytest.raises(ConfigError):
        with_overrides(ScenarioConfig(), defense='bogus')


def test_softtrr_needs_a_reversible_mapping():
    text = ("[dram]\nbank_fns = 0x4000\nrow_shift = 23\nrow_bits = 7\ncolumn_bits = 22\n"
            "rows_per_bank = 128\nrow_size = 0x400000\n")
    with pytest.raises(ConfigError, match='reversible'):
        parse_scenario(text)
    assert parse_scenario(text + "[defense]\nmode = none\n").defense.mode == 'none'
