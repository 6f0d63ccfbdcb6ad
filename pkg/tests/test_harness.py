from __future__ import annotations

import json

import pandas as pd
import pytest

import app
import config as settings
from rowsim.errors import InvariantViolation
from rowsim.harness import RunReport, Simulation, emit_metrics, run_scenario
from rowsim.metrics import METRIC_COLUMNS, load_metrics

from conftest import scenario_for


def _report(defense: str, pt_flips: int) -> RunReport:
    return RunReport(scenario='memory_spray', defense=defense, flips_total=pt_flips, flips_in_pt_rows=pt_flips,
                     rsvd_faults=0, refreshes=0, armed_ptes=0, leak_events=0, activations=0,
                     max_unrefreshed_hammer_ns=0, sim_ns=0, frame=pd.DataFrame(columns=METRIC_COLUMNS))


def _write_scenario(tmp_path, body: str, name: str = 'run.ini') -> str:
    path = tmp_path / name
    path.write_text(body)
    return str(path)


def test_zero_duration_run(tmp_path):
    report = run_scenario(scenario_for('softtrr', attack=dict(duration=0)))
    assert report.sim_ns == 0
    assert report.frame.empty
    assert list(report.frame.columns) == METRIC_COLUMNS
    assert report.flips_total == report.rsvd_faults == report.refreshes == report.activations == 0
    path = tmp_path / 'empty.csv'
    emit_metrics(report, str(path))
    assert len(path.read_text().splitlines()) == 2


def test_idle_softtrr_samples(make_sim):
    sim = make_sim('softtrr')
    sim.run_for(3_000_000)
    frame = sim.recorder.to_frame()
    assert list(frame['sim_ns']) == [1_000_000, 2_000_000, 3_000_000]
    assert (frame['pt_nodes'] >= 1).all()
    assert (frame['ring_capacity'] == 1024).all()
    assert frame['rsvd_faults'].sum() == 0


def test_double_sided_pattern_run():
    report = run_scenario(scenario_for('none', attack=dict(pattern='double', duration=5_000_000)))
    assert report.scenario == 'double'
    assert report.flips_in_pt_rows >= 1
    assert report.hammer is not None and report.hammer.flips
    assert not report.security_violated
    assert len(report.frame) == report.sim_ns // 1_000_000 >= 5


def test_security_verdict():
    assert _report('softtrr', 1).security_violated
    assert not _report('softtrr', 0).security_violated
    assert not _report('none', 3).security_violated


def test_exposure_bound_check(make_sim):
    sim = make_sim('softtrr')
    sim.check_exposure_bound()
    sim.defense.max_unrefreshed_hammer_ns = 10 ** 9
    with pytest.raises(InvariantViolation):
        sim.check_exposure_bound()


def test_emitted_metrics_are_reproducible(tmp_path):
    scenario = scenario_for('none', attack=dict(pattern='double', duration=3_000_000))
    paths = []
    for i in range(2):
        path = tmp_path / f'run{i}.json'
        emit_metrics(run_scenario(scenario), str(path), 'json')
        paths.append(path)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    frame, summary = load_metrics(str(paths[0]))
    assert len(frame) == summary['sim_ns'] // 1_000_000 >= 3
    assert summary['defense'] == 'none'
    assert 'wall_time' not in summary


# ----------------------------------------------------------------------
# Command line
# ----------------------------------------------------------------------
def test_cli_idle_run(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    metrics = tmp_path / 'idle.csv'
    path = _write_scenario(tmp_path, f"[attack]\nduration = 3_000_000\n[output]\nmetrics = {metrics}\n")
    assert app.main(['run', path]) == app.EXIT_OK
    frame, summary = load_metrics(str(metrics))
    assert len(frame) == 3
    assert summary['rsvd_faults'] == 0
    assert json.loads(capsys.readouterr().out)['defense'] == 'softtrr'


def test_cli_overrides_format_and_path(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    path = _write_scenario(tmp_path, "[attack]\nduration = 2_000_000\n")
    out = tmp_path / 'out.json'
    assert app.main(['--metrics', str(out), '--format', 'json', 'run', path]) == app.EXIT_OK
    assert len(load_metrics(str(out))[0]) == 2


def test_cli_logs_at_info_without_env(monkeypatch):
    assert type(settings.select_config('')) is settings.Config
    assert type(settings.select_config('production')) is settings.ProductionConfig
    assert type(settings.select_config('development')) is settings.DevelopmentConfig
    monkeypatch.setattr(app, 'config', settings.select_config(''))
    assert app.build_parser().parse_args(['fuzz']).log_level == settings.Config.LOG_LEVEL


def test_cli_config_errors(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    bad = _write_scenario(tmp_path, "[defense]\ncount_limit = 1\n")
    assert app.main(['run', bad]) == app.EXIT_CONFIG
    assert app.main(['run', str(tmp_path / 'missing.ini')]) == app.EXIT_CONFIG


def test_cli_invariant_violation(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)

    def broken(scenario):
        raise InvariantViolation("exposure exceeded")

    monkeypatch.setattr(app, 'run_scenario', broken)
    path = _write_scenario(tmp_path, "[attack]\nduration = 1_000_000\n")
    assert app.main(['run', path]) == app.EXIT_INVARIANT


def test_cli_security_exit(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    monkeypatch.setattr(app, 'run_scenario', lambda scenario: _report('softtrr', 2))
    path = _write_scenario(tmp_path, "[attack]\nduration = 1_000_000\n")
    assert app.main(['run', path]) == app.EXIT_SECURITY


def test_cli_attack(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    code = app.main(['--duration-ms', '5', 'attack', 'memory_spray', '--defense', 'none', '--m', '1'])
    assert code == app.EXIT_OK
    summary = json.loads(capsys.readouterr().out)
    assert summary['victims'] == 1
    assert summary['flips_in_pt_rows'] >= 1
    assert (tmp_path / 'output' / 'metrics.csv').exists()


def test_cli_fuzz(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert app.main(['fuzz', '--budget', '1', '--defense', 'none', '--seed', '2']) == app.EXIT_OK
    assert json.loads(capsys.readouterr().out)['trials'] == 1


def test_cli_probe_mapping(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert app.main(['probe-mapping', '--samples', '1500']) == app.EXIT_OK
    result = json.loads(capsys.readouterr().out)
    assert result['matches_configured'] is True
    assert result['complete'] is True
    assert result['clusters'] == 8


def test_cli_rejects_unknown_choices():
    with pytest.raises(SystemExit):
        app.main(['attack', 'rowpress'])
    with pytest.raises(SystemExit):
        app.main(['--format', 'xml', 'run', 'x.ini'])
