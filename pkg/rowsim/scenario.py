"""
Scenario Configuration
Loads and validates the sectioned scenario files ([dram], [defense],
[attack], [output]) that describe one simulator run.
"""
import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional

from config import Config
from .dram import DramConfig, DramModule
from .errors import ConfigError

logger = logging.getLogger(__name__)

DEFENSE_MODES = ('none', 'softtrr', 'chiptrr')
ATTACK_SCENARIOS = ('none', 'memory_spray', 'cattmew', 'pthammer')
ATTACK_PATTERNS = ('none', 'double', 'single', 'one_location', 'many')
METRIC_FORMATS = ('csv', 'json')


@dataclass
class DefenseSettings:
    mode: str = Config.DEFENSE_MODE
    timer_inr: int = Config.TIMER_INR
    count_limit: int = Config.COUNT_LIMIT
    max_distance: int = Config.DEFENSE_MAX_DISTANCE
    ring_capacity: int = Config.RING_CAPACITY
    chiptrr_k: int = Config.CHIPTRR_K
    chiptrr_threshold: int = Config.CHIPTRR_THRESHOLD


@dataclass
class AttackSettings:
    scenario: str = Config.ATTACK_SCENARIO
    m: int = Config.ATTACK_M
    pattern: str = Config.ATTACK_PATTERN
    duration: int = Config.ATTACK_DURATION
    seed: int = Config.SEED
    fast_forward: bool = Config.FAST_FORWARD


@dataclass
class OutputSettings:
    metrics: str = Config.DEFAULT_METRICS_PATH
    format: str = Config.DEFAULT_METRICS_FORMAT


@dataclass
class ScenarioConfig:
    dram: DramConfig = field(default_factory=DramConfig)
    defense: DefenseSettings = field(default_factory=DefenseSettings)
    attack: AttackSettings = field(default_factory=AttackSettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    source: str = '<defaults>'

    def validate(self) -> 'ScenarioConfig':
        """Raise ConfigError citing the first violated constraint"""
        self.dram.validate()
        d = self.defense
        if d.mode not in DEFENSE_MODES:
            raise ConfigError(f"defense.mode must be one of {', '.join(DEFENSE_MODES)}; got '{d.mode}'")
        if d.mode == 'softtrr':
            if d.count_limit < 2:
                raise ConfigError(f"defense.count_limit must be no less than 2; got {d.count_limit}")
            if d.timer_inr <= 0:
                raise ConfigError("defense.timer_inr must be > 0")
            if d.timer_inr * (d.count_limit - 1) > self.dram.t_rc * self.dram.hc_first:
                raise ConfigError(
                    f"defense.timer_inr x (count_limit - 1) = {d.timer_inr * (d.count_limit - 1)} ns exceeds "
                    f"t_rc x hc_first = {self.dram.t_rc * self.dram.hc_first} ns")
            if d.max_distance < 1:
                raise ConfigError("defense.max_distance must be >= 1")
            if d.ring_capacity < 1:
                raise ConfigError("defense.ring_capacity must be >= 1")
            if not DramModule(self.dram).reversible:
                raise ConfigError("defense.mode softtrr requires a reversible dram.bank_fns mapping")
        if d.mode == 'chiptrr':
            if d.chiptrr_k < 0:
                raise ConfigError("defense.chiptrr_k must be >= 0")
            if d.chiptrr_threshold <= 0:
                raise ConfigError("defense.chiptrr_threshold must be > 0")
        a = self.attack
        if a.scenario not in ATTACK_SCENARIOS:
            raise ConfigError(f"attack.scenario must be one of {', '.join(ATTACK_SCENARIOS)}; got '{a.scenario}'")
        if a.pattern not in ATTACK_PATTERNS:
            raise ConfigError(f"attack.pattern must be one of {', '.join(ATTACK_PATTERNS)}; got '{a.pattern}'")
        if a.m < 0:
            raise ConfigError("attack.m must be >= 0")
        if a.duration < 0:
            raise ConfigError("attack.duration must be >= 0")
        if self.output.format not in METRIC_FORMATS:
            raise ConfigError(f"output.format must be csv or json; got '{self.output.format}'")
        return self


def _int(value: str) -> int:
    return int(value.strip().replace('_', ''), 0)


def _int_list(value: str) -> List[int]:
    return [_int(v) for v in value.split(',') if v.strip()]


def _bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered in ('1', 'true', 'yes', 'on'):
        return True
    if lowered in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError(f"not a boolean: {value}")


def _parser_for(tp: Any) -> Callable[[str], Any]:
    if tp in (int, 'int'):
        return _int
    if tp in (float, 'float'):
        return float
    if tp in (bool, 'bool'):
        return _bool
    if tp in (str, 'str'):
        return str.strip
    return _int_list


_SECTIONS = {
    'dram': DramConfig,
    'defense': DefenseSettings,
    'attack': AttackSettings,
    'output': OutputSettings,
}


def _section_values(name: str, section: configparser.SectionProxy) -> Dict[str, Any]:
    fields = {f.name: f for f in dataclasses.fields(_SECTIONS[name])}
    values = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key '{key}' in section [{name}]")
        try:
            values[key] = _parser_for(fields[key].type)(raw)
        except ValueError as e:
            raise ConfigError(f"[{name}] {key}: cannot parse '{raw}' ({e})") from e
    return values


def parse_scenario(text: str, source: str = '<string>') -> ScenarioConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section='__defaults__')
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: {e}") from e
    for name in parser.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"{source}: unknown section [{name}]")
    parts = {name: cls(**_section_values(name, parser[name])) if parser.has_section(name) else cls()
             for name, cls in _SECTIONS.items()}
    scenario = ScenarioConfig(source=source, **parts)
    return scenario.validate()


def load_scenario(path: str) -> ScenarioConfig:
    """Read and validate a scenario file"""
    if not os.path.isfile(path):
        raise ConfigError(f"scenario file not found: {path}")
    with open(path, encoding='utf-8') as fh:
        text = fh.read()
    scenario = parse_scenario(text, source=path)
    logger.info(f"Loaded scenario {path}: defense={scenario.defense.mode} attack={scenario.attack.scenario}")
    return scenario


def with_overrides(scenario: ScenarioConfig, defense: Optional[str] = None, m: Optional[int] = None,
                   seed: Optional[int] = None, metrics: Optional[str] = None, fmt: Optional[str] = None,
                   duration_ms: Optional[float] = None, attack: Optional[str] = None) -> ScenarioConfig:
    """Copy of scenario with command-line values applied and revalidated"""
    result = dataclasses.replace(
        scenario,
        dram=dataclasses.replace(scenario.dram),
        defense=dataclasses.replace(scenario.defense),
        attack=dataclasses.replace(scenario.attack),
        output=dataclasses.replace(scenario.output),
    )
    if defense is not None:
        result.defense.mode = defense
    if attack is not None:
        result.attack.scenario = attack
    if m is not None:
        result.attack.m = m
    if seed is not None:
        result.attack.seed = seed
    if metrics is not None:
        result.output.metrics = metrics
    if fmt is not None:
        result.output.format = fmt
    if duration_ms is not None:
        result.attack.duration = int(duration_ms * 1_000_000)
    return result.validate()
