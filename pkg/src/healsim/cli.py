"""``healsim`` command line: run experiment files, sweep one parameter, dump
overlay snapshots."""
import argparse
import csv
import functools
import json
import pathlib
import sys
from typing import Callable, Optional, Sequence

from . import logging
from .config import SWEEPABLE, ExperimentConfig, TopologyKind, load_experiment_file
from .engine import (METRICS_COLUMNS, build_manifest, build_overlay, repetition_seeds, run_experiment,
                     write_manifest, write_mean_csv, write_metrics_csv)
from .exceptions import HealsimConfigError, HealsimException, HealsimOutputError
from .overlay import write_snapshot

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_SKIPPED = 1
EXIT_ERROR = 2


def _diagnose(func: Callable[..., int]) -> Callable[..., int]:
    @functools.wraps(func)
    def wrapper(*args, **kwargs) -> int:
        try:
            return func(*args, **kwargs)
        except HealsimException as exc:
            print(f'healsim: error: {exc}', file=sys.stderr)
            return EXIT_ERROR
    return wrapper


def _with_seed(configs: list[ExperimentConfig], seed: Optional[int]) -> list[ExperimentConfig]:
    if seed is None:
        return configs
    return [config.replace(master_seed=seed) for config in configs]


def _claim(paths: Sequence[pathlib.Path], force: bool) -> None:
    existing = [str(path) for path in paths if path.exists()]
    if existing and not force:
        raise HealsimOutputError(f'refusing to overwrite {", ".join(existing)} (use --force)')


def _run_outputs(out_dir: pathlib.Path, name: str) -> tuple[pathlib.Path, pathlib.Path, pathlib.Path]:
    return (out_dir / f'{name}.metrics.csv', out_dir / f'{name}.mean.csv', out_dir / f'{name}.manifest.json')


@_diagnose
def cmd_run(config_path: str | pathlib.Path, output_dir: str | pathlib.Path, override_seed: Optional[int] = None,
            jobs: int = 1, force: bool = False) -> int:
    configs = _with_seed(load_experiment_file(config_path), override_seed)
    out_dir = pathlib.Path(output_dir)
    _claim([path for config in configs for path in _run_outputs(out_dir, config.name)], force)
    out_dir.mkdir(parents=True, exist_ok=True)
    for config in configs:
        result = run_experiment(config, jobs=jobs)
        metrics_path, mean_path, manifest_path = _run_outputs(out_dir, config.name)
        write_metrics_csv(result, metrics_path)
        write_mean_csv(result, mean_path)
        write_manifest(result, manifest_path)
        logger.info("Wrote %s, %s and %s", metrics_path.name, mean_path.name, manifest_path.name)
    return EXIT_OK


def _parse_value(parameter: str, raw: str) -> int | float | str:
    if parameter == 'learning_rate':
        return float(raw)
    if parameter == 's' and raw == 'half':
        return raw
    return int(raw)


def _sweep_variant(base: ExperimentConfig, parameter: str, raw: str) -> ExperimentConfig:
    try:
        value = _parse_value(parameter, raw)
    except ValueError:
        raise HealsimConfigError(f"entry '{base.name}': field '{parameter}': {raw!r} is not a valid value") from None
    if parameter == 'learning_rate':
        variant = base.replace(hyper={'learning_rate': value})
    else:
        variant = base.replace(**{parameter: value})
    return variant.validate()


@_diagnose
def cmd_sweep(base_config: str | pathlib.Path, parameter: str, values: Sequence[str],
              output_dir: str | pathlib.Path, override_seed: Optional[int] = None, jobs: int = 1,
              force: bool = False) -> int:
    """Run every entry of ``base_config`` once per value of ``parameter`` into
    one long-format CSV keyed by the swept value."""
    if parameter not in SWEEPABLE:
        raise HealsimConfigError(f"cannot sweep {parameter!r}; choose one of {', '.join(SWEEPABLE)}")
    bases = _with_seed(load_experiment_file(base_config), override_seed)
    variants: list[tuple[str, ExperimentConfig]] = []
    skipped = []
    for base in bases:
        for raw in values:
            try:
                variants.append((raw, _sweep_variant(base, parameter, raw)))
            except HealsimConfigError as exc:
                skipped.append(raw)
                logger.warning('Skipping %s=%s: %s', parameter, raw, exc)
                print(f'healsim: skipped {parameter}={raw}: {exc}', file=sys.stderr)

    out_dir = pathlib.Path(output_dir)
    csv_path = out_dir / f'sweep_{parameter}.csv'
    manifest_path = out_dir / f'sweep_{parameter}.manifest.json'
    _claim([csv_path, manifest_path], force)
    out_dir.mkdir(parents=True, exist_ok=True)

    manifests = []
    with open(csv_path, 'w', encoding='utf-8', newline='') as file:
        writer = csv.writer(file, lineterminator='\n')
        writer.writerow(('experiment', 'parameter', 'value', *METRICS_COLUMNS))
        for raw, config in variants:
            result = run_experiment(config, jobs=jobs)
            for series in result.series:
                for record in series.records:
                    writer.writerow((config.name, parameter, raw, record.cycle, series.repetition,
                                     repr(record.accuracy), record.live_nodes, record.hub_count,
                                     record.msgs_sent, record.msgs_dropped,
                                     '' if record.diameter is None else record.diameter))
            manifest = build_manifest(result)
            manifest['swept'] = {'parameter': parameter, 'value': raw}
            manifests.append(manifest)
    with open(manifest_path, 'w', encoding='utf-8', newline='\n') as file:
        json.dump({'parameter': parameter, 'values': list(values), 'skipped': skipped, 'runs': manifests},
                  file, indent=2)
        file.write('\n')
    logger.info('Sweep over %s: %d runs, %d skipped', parameter, len(variants), len(skipped))
    return EXIT_SKIPPED if skipped else EXIT_OK


@_diagnose
def cmd_inspect_overlay(config_path: str | pathlib.Path, cycles: int, output_dir: str | pathlib.Path,
                        override_seed: Optional[int] = None, force: bool = False) -> int:
    """Run the overlay alone from its bootstrap graph and write one snapshot
    per cycle under ``<output_dir>/<name>/``."""
    configs = _with_seed(load_experiment_file(config_path), override_seed)
    for config in configs:
        if config.topology.kind is not TopologyKind.ELEVATOR:
            raise HealsimConfigError(f"entry '{config.name}': field 'topology.kind': "
                                     f"{config.topology.kind.value} is static, nothing to inspect")
    if cycles < 1:
        raise HealsimConfigError(f'cycles must be >= 1, got {cycles}')
    out_dir = pathlib.Path(output_dir)
    _claim([out_dir / config.name for config in configs], force)
    for config in configs:
        seed = repetition_seeds(config.master_seed, 1)[0]
        overlay = build_overlay(config.replace(overlay_warmup=0), seed)
        for cycle in range(cycles):
            overlay.step()
            write_snapshot(overlay.graph, cycle, out_dir / config.name, config.hub_threshold)
        logger.info("Overlay '%s': %d snapshots, %d hubs at the end", config.name, cycles, len(overlay.hubs()))
    return EXIT_OK


def _positive_int(raw: str) -> int:
    value = int(raw)
    if value < 1:
        raise argparse.ArgumentTypeError(f'must be >= 1, got {value}')
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='YAML experiment file or a run manifest')
    common.add_argument('--out', default='results', help='output directory')
    common.add_argument('--seed', type=int, default=None, help='override every master seed')
    common.add_argument('--force', action='store_true', help='overwrite existing outputs')
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument('--verbose', action='store_true', help='log per-cycle details')
    verbosity.add_argument('--quiet', action='store_true', help='log warnings only')

    parser = argparse.ArgumentParser(prog='healsim', description='Hub-based decentralized learning simulator')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', parents=[common], help='run every experiment of a config file')
    run.add_argument('--jobs', type=_positive_int, default=1, help='worker processes for repetitions')

    sweep = commands.add_parser('sweep', parents=[common], help='rerun a config over values of one parameter')
    sweep.add_argument('--jobs', type=_positive_int, default=1, help='worker processes for repetitions')
    sweep.add_argument('--param', required=True, choices=SWEEPABLE)
    sweep.add_argument('--values', required=True, nargs='+', help='values, space or comma separated')

    inspect = commands.add_parser('inspect-overlay', parents=[common], help='dump Elevator overlay snapshots')
    inspect.add_argument('--cycles', type=_positive_int, default=10)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.set_level(logging.DEBUG)
    elif args.quiet:
        logging.set_level(logging.WARNING)

    if args.command == 'run':
        return cmd_run(args.config, args.out, args.seed, jobs=args.jobs, force=args.force)
    if args.command == 'sweep':
        values = [value for chunk in args.values for value in chunk.split(',') if value]
        return cmd_sweep(args.config, args.param, values, args.out, args.seed, jobs=args.jobs, force=args.force)
    return cmd_inspect_overlay(args.config, args.cycles, args.out, args.seed, force=args.force)
