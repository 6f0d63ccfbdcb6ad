"""
Main Application Orchestrator
Coordinates scenario runs, attacks, fuzzing and mapping recovery, and
provides the command-line surface.
"""
import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

from config import Config, config
from rowsim import gf2
from rowsim.attacks import fuzz_patterns
from rowsim.dram import DramModule
from rowsim.errors import ConfigError, InvariantViolation, SimulationError
from rowsim.harness import RunReport, emit_metrics, run_scenario, simulation_factory
from rowsim.mapping_probe import MappingProbe
from rowsim.scenario import ScenarioConfig, load_scenario, with_overrides

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SECURITY = 1
EXIT_CONFIG = 2
EXIT_INVARIANT = 3


class RowRefreshApp:
    """
    Runs scenarios and writes their metrics.

    Every public method works on a validated ScenarioConfig; the
    command-line layer only turns arguments into one.
    """

    def __init__(self, scenario: Optional[ScenarioConfig] = None):
        self.scenario = (scenario or ScenarioConfig()).validate()
        Config.create_directories()
        logger.info(f"{Config.APP_NAME} initialized: defense={self.scenario.defense.mode}")

    def run(self, emit: bool = True) -> RunReport:
        report = run_scenario(self.scenario)
        if emit:
            emit_metrics(report, self.scenario.output.metrics, self.scenario.output.format)
        return report

    def attack(self, name: str, m: Optional[int] = None, emit: bool = True) -> RunReport:
        self.scenario = with_overrides(self.scenario, attack=name, m=m)
        return self.run(emit)

    def fuzz(self, budget: int, stop_on_flip: bool = False) -> Dict:
        factory = simulation_factory(self.scenario)
        report = fuzz_patterns(factory, budget, self.scenario.defense.mode,
                               seed=self.scenario.attack.seed, stop_on_flip=stop_on_flip)
        return {
            'defense': report.defense,
            'trials': len(report.trials),
            'flip_patterns': len(report.hits),
            'pt_flip_patterns': len(report.pt_hits),
            'largest_flipping_n': max((t.n for t in report.hits), default=0),
        }

    def probe_mapping(self, samples: int, noise: float = 0.0) -> Dict:
        dram = DramModule(self.scenario.dram)
        probe = MappingProbe(dram, self.scenario.attack.seed, noise)
        result = probe.recover_bank_functions(samples)
        return {
            'masks': result.hex_masks(),
            'complete': result.complete,
            'clusters': result.clusters,
            'matches_configured': gf2.same_span(result.masks, self.scenario.dram.bank_fns),
        }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='rowsim', description=Config.APP_NAME)
    parser.add_argument('--config', help='Scenario file providing defaults')
    parser.add_argument('--metrics', help='Metrics output path')
    parser.add_argument('--format', choices=('csv', 'json'), help='Metrics format')
    parser.add_argument('--duration-ms', type=float, help='Simulated duration (per victim for attacks)')
    parser.add_argument('--log-level', default=config.LOG_LEVEL, help='Logging level')
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a scenario file')
    run.add_argument('scenario', help='Scenario file')

    attack = sub.add_parser('attack', help='Run one page-table attack')
    attack.add_argument('name', choices=('memory_spray', 'cattmew', 'pthammer'))
    attack.add_argument('--defense', choices=('none', 'softtrr', 'chiptrr'))
    attack.add_argument('--m', type=int)
    attack.add_argument('--seed', type=int)

    fuzz = sub.add_parser('fuzz', help='Fuzz many-sided hammer patterns')
    fuzz.add_argument('--budget', type=int, default=Config.FUZZ_BUDGET)
    fuzz.add_argument('--defense', choices=('none', 'softtrr', 'chiptrr'))
    fuzz.add_argument('--seed', type=int)
    fuzz.add_argument('--stop-on-flip', action='store_true')

    probe = sub.add_parser('probe-mapping', help='Recover bank functions from timing')
    probe.add_argument('--samples', type=int, default=Config.PROBE_SAMPLES)
    probe.add_argument('--noise', type=float, default=0.0)
    probe.add_argument('--seed', type=int)
    return parser


def _scenario_from_args(args) -> ScenarioConfig:
    path = getattr(args, 'scenario', None) or args.config
    scenario = load_scenario(path) if path else ScenarioConfig()
    return with_overrides(scenario, defense=getattr(args, 'defense', None), m=getattr(args, 'm', None),
                          seed=getattr(args, 'seed', None), metrics=args.metrics, fmt=args.format,
                          duration_ms=args.duration_ms)


def _print_report(report: RunReport):
    print(json.dumps(report.summary(), sort_keys=True, indent=2))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format=Config.LOG_FORMAT)
    try:
        app = RowRefreshApp(_scenario_from_args(args))
        if args.command == 'run':
            report = app.run()
            _print_report(report)
            return EXIT_SECURITY if report.security_violated else EXIT_OK
        if args.command == 'attack':
            report = app.attack(args.name)
            _print_report(report)
            return EXIT_SECURITY if report.security_violated else EXIT_OK
        if args.command == 'fuzz':
            summary = app.fuzz(args.budget, args.stop_on_flip)
            print(json.dumps(summary, sort_keys=True, indent=2))
            if summary['defense'] == 'softtrr' and summary['pt_flip_patterns']:
                return EXIT_SECURITY
            return EXIT_OK
        if args.command == 'probe-mapping':
            print(json.dumps(app.probe_mapping(args.samples, args.noise), indent=2))
            return EXIT_OK
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except InvariantViolation as e:
        logger.error(f"Internal invariant violated: {e}")
        return EXIT_INVARIANT
    except SimulationError as e:
        logger.error(f"Simulation failed: {e}")
        return EXIT_INVARIANT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
