"""Command line entry point.

    fedlog run --config configs/synthetic_circle.cfg --algorithm fedlog,lgfedavg1
    fedlog report --in results

"""
import argparse
import logging
import sys
from pathlib import Path

from .config import default_out_dir, load_config
from .constants import Algorithm
from .exception import ConfigError, FedLogException
from .runner import (
    format_summary,
    read_metrics,
    run_sweep,
    summarize_runs,
    write_metrics,
)
from .utils import parse_int_list

LOG_FORMAT = ('%(asctime)s,[%(levelname)s],(%(threadName)s),'
              '%(module)s.%(funcName)s:%(lineno)s,%(message)s')
LOG_DATE_FORMAT = '%Y-%m-%d %H:%M:%S'

_log = logging.getLogger(__name__)


def _algorithms(text: str) -> 'list[Algorithm]':
    try:
        return [Algorithm[name.strip().upper()]
                for name in text.split(',') if name.strip()]
    except KeyError as err:
        choices = ', '.join(a.name.lower() for a in Algorithm)
        raise argparse.ArgumentTypeError(
            f'unknown algorithm {err} (choose from {choices})') from err


def _int_list(text: str) -> 'list[int]':
    try:
        return parse_int_list(text)
    except ValueError as err:
        raise argparse.ArgumentTypeError(f'not a list of integers: {text}') from err


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='fedlog',
        description='Federated learning with Bayesian head aggregation')
    parser.add_argument('--log-level', default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        help='Logging level (default: INFO)')
    sub = parser.add_subparsers(dest='command', required=True)
    run = sub.add_parser('run', help='Run an experiment configuration')
    run.add_argument('--config', required=True, type=Path,
                     help='Experiment configuration file')
    run.add_argument('--algorithm', type=_algorithms,
                     help='Comma separated algorithms (fedlog, fedavg, lgfedavg1)')
    run.add_argument('--rounds', type=int, help='Global rounds')
    run.add_argument('--seed-list', type=_int_list,
                     help='Comma separated seeds, one run each')
    run.add_argument('--local-epochs-list', type=_int_list,
                     help='Comma separated local epoch counts to sweep')
    run.add_argument('--out', type=Path, default=None,
                     help='Output directory (default: $FEDLOG_OUT_DIR or results)')
    run.add_argument('--dump-messages', type=Path, default=None, metavar='DIR',
                     help='Write the CRC framed messages of every FedLog'
                     ' round to DIR')
    report = sub.add_parser('report', help='Summarize metrics files')
    report.add_argument('--in', dest='in_dir', required=True, type=Path,
                        help='Directory of metrics CSV files')
    return parser


def _run(args: argparse.Namespace) -> int:
    overrides = {'rounds': args.rounds, 'seeds': args.seed_list}
    algorithms = args.algorithm
    if algorithms:
        overrides['algorithm'] = algorithms[0]
    config = load_config(args.config, overrides)
    rows = run_sweep(config, algorithms, args.local_epochs_list,
                     args.dump_messages)
    out_dir = args.out or Path(default_out_dir())
    path = write_metrics(rows, out_dir / f'{args.config.stem}.csv', config)
    print(f'{len(rows)} rows written to {path}')
    return 0


def _report(args: argparse.Namespace) -> int:
    paths = sorted(Path(args.in_dir).glob('*.csv'))
    if not paths:
        _log.error('No metrics files in %s', args.in_dir)
        return 1
    for path in paths:
        summaries, comparisons = summarize_runs(read_metrics(path))
        print(f'== {path.name}')
        print(format_summary(summaries, comparisons))
    return 0


def main(argv: 'list[str]|None' = None) -> int:
    """Parse arguments and dispatch; returns the process exit code."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format=LOG_FORMAT, datefmt=LOG_DATE_FORMAT)
    try:
        if args.command == 'run':
            return _run(args)
        return _report(args)
    except ConfigError as err:
        for error in err.errors or [str(err)]:
            print(f'config error: {error}', file=sys.stderr)
        return 2
    except (FedLogException, OSError) as err:
        print(f'error: {err}', file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
