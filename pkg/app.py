import argparse
import logging
import sys

from backend.database import get_run_log, init_db
from backend.errors import HardWallError
from backend.experiments import EXPERIMENTS
from backend.harness import build_config, load_config_file, read_report, run
from backend.tail_grid import cauchy_gap, ensure_table, fixed_point_residual
from config.settings import CACHE_DIR, DX, LOG_LEVEL, N_REF

logger = logging.getLogger('hardwall')


def _add_run_flags(parser):
    parser.add_argument('--n', type=int, help='tree depth (experiment default if omitted)')
    parser.add_argument('--replicas', type=int)
    parser.add_argument('--seed', type=int)
    parser.add_argument('--dx', type=float)
    parser.add_argument('--nref', type=int, dest='n_ref')
    parser.add_argument('--k', type=int, dest='k_plus_delta', help='P^{+,delta} construction depth')
    parser.add_argument('--alpha', type=float, action='append', dest='alphas')
    parser.add_argument('--delta', type=float)
    parser.add_argument('--out', dest='output_dir')
    parser.add_argument('--cache-dir', dest='cache_dir')
    parser.add_argument('--threads', type=int)
    parser.add_argument('--field-threads', type=int, dest='field_threads', help='workers inside one free-field draw')
    parser.add_argument('--config', help='config file with an [experiment] section')


def build_parser():
    parser = argparse.ArgumentParser(prog='hardwall', description='Hard-wall tree field engine')
    sub = parser.add_subparsers(dest='command', required=True)

    tables = sub.add_parser('tables', help='build or load the tail table')
    tables.add_argument('--nref', type=int, default=N_REF, dest='n_ref')
    tables.add_argument('--dx', type=float, default=DX)
    tables.add_argument('--cache-dir', default=CACHE_DIR, dest='cache_dir')

    runp = sub.add_parser('run', help='run one experiment')
    runp.add_argument('experiment', choices=sorted(EXPERIMENTS))
    _add_run_flags(runp)

    report = sub.add_parser('report', help='recent runs, or one report in detail')
    report.add_argument('path', nargs='?', help='report.json to summarize')
    report.add_argument('--limit', type=int, default=20)
    return parser


def cmd_tables(args):
    table = ensure_table(args.n_ref, args.dx, args.cache_dir)
    print(f"[Tables] N={table.max_depth} dx={table.grid.dx} nodes={table.grid.length} digest={table.build_digest}")
    print(f"[Tables] p_inf Cauchy gap {cauchy_gap(table):.3e}, fixed-point residual {fixed_point_residual(table):.3e}")
    return 0


def cmd_run(args):
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {k: getattr(args, k) for k in (
        'n', 'replicas', 'seed', 'dx', 'n_ref', 'k_plus_delta', 'delta', 'output_dir', 'cache_dir', 'threads',
        'field_threads',
    )}
    overrides['alphas'] = tuple(args.alphas) if args.alphas else None
    config = build_config(file_values, experiment=args.experiment, **overrides)
    report = run(config)
    for c in report.checks:
        print(f"  {'PASS' if c.passed else 'FAIL'}  {c.name:<40} {c.statistic:12.6g}  <= {c.threshold:.6g}")
    return 0 if report.passed else 1


def cmd_report(args):
    if args.path:
        data = read_report(args.path)
        print(f"{data['config']['experiment']} (seed {data['config']['seed']}): "
              f"{'passed' if data['passed'] else 'FAILED'} in {data['wall_time']:.1f} s")
        for c in data['checks']:
            print(f"  {'PASS' if c['passed'] else 'FAIL'}  {c['name']:<40} {c['statistic']}  <= {c['threshold']}")
        for key, value in sorted(data['certificates'].items()):
            print(f"  {key} = {value}")
        return 0 if data['passed'] else 1
    init_db()
    for row in get_run_log(args.limit):
        print(f"{row['id']:>5}  {row['started_at'][:19]}  {row['experiment']:<16} {row['status']:<8} "
              f"pass={row['checks_passed']} fail={row['checks_failed']}  {row['report_path'] or row['error_message'] or ''}")
    return 0


COMMANDS = {'tables': cmd_tables, 'run': cmd_run, 'report': cmd_report}


def main(argv=None):
    logging.basicConfig(level=LOG_LEVEL, format='%(asctime)s %(levelname)s %(name)s %(message)s')
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except HardWallError as e:
        logger.error(f"[Runner] {type(e).__name__}: {e}")
        return 2
    except Exception:
        logger.exception(f"[Runner] {args.command} crashed")
        return 2


if __name__ == '__main__':
    sys.exit(main())
