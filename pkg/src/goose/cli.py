"""Command line entry point: ``goose run|bench <config>``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .harness import ConfigError, emit_csv, parse_config, run_experiment

FULL_SCALE = {
    'safe-bo-1d': {'seeds': 40},
    'safe-bo-2d': {'seeds': 10},
    'safe-path-synthetic': {'seeds': 100, 'world_sizes': tuple(range(20, 100, 10))},
    'safe-path-heightmap': {'seeds': 4},
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='goose', description=__doc__)
    parser.add_argument('-v', '--verbose', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)
    for name, text in (('run', 'run an experiment and write CSVs'),
                       ('bench', 'run an experiment and report wall time per iteration')):
        p = sub.add_parser(name, help=text)
        p.add_argument('config')
        p.add_argument('--strict', action='store_true',
                       help='exit with status 1 if any evaluation was unsafe')
        p.add_argument('--out', default='results', help='output directory')
        p.add_argument('--seeds', type=int, help='override the number of seeds')
        p.add_argument('--full-scale', action='store_true',
                       help='use the full seed counts and world sizes')
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(message)s')
    try:
        cfg = parse_config(args.config)
        changes = dict(FULL_SCALE[cfg.experiment]) if args.full_scale else {}
        if args.seeds is not None:
            changes['seeds'] = args.seeds
        if changes:
            cfg = dataclasses.replace(cfg, **changes)
    except ConfigError as err:
        print(f"goose: config error: {err}", file=sys.stderr)
        return 2

    report = run_experiment(cfg)
    for path in emit_csv(report, args.out):
        print(path)
    if args.command == 'bench':
        for alg, t in sorted(report.timing.items()):
            print(f"{alg:10s} {t['mean_step_seconds'] * 1e3:9.3f} ms/iteration "
                  f"over {t['steps']} iterations")
    if report.violations:
        print(f"goose: {len(report.violations)} unsafe evaluations", file=sys.stderr)
        if args.strict:
            return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
