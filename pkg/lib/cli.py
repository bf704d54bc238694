#!/usr/bin/env python3
"""
homfem CLI - finite element solves and periodic-cell homogenization
"""

import sys
import argparse
from pathlib import Path

# Add the src directory to the Python path
src_path = Path(__file__).parent / 'src'
sys.path.insert(0, str(src_path))

from cli_commands import (
    simple_command,
    homogen_command,
    macro_command,
    convert_command,
)
from errors import ConfigError, DependencyError, HomfemError
from logger import VERBOSITY_DEBUG, VERBOSITY_NORMAL, log_error, set_verbosity


EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='homfem',
        description='homfem - declarative finite elements and homogenization of periodic cells',
    )
    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--verbose', '-v', action='store_true', help='Show debug diagnostics')

    # simple command
    simple_parser = subparsers.add_parser('simple', parents=[common], help='Solve a problem file')
    simple_parser.add_argument('config', help='Problem file (JSON)')
    simple_parser.add_argument('--output-dir', help='Directory for VTK output (default: next to the config)')

    # homogen command
    homogen_parser = subparsers.add_parser('homogen', parents=[common],
                                           help='Compute homogenized coefficients of a micro cell')
    homogen_parser.add_argument('config', help='Micro problem file with coefs and requirements')
    homogen_parser.add_argument('--workers', type=_positive_int,
                                help='Concurrent engine tasks (default: available CPUs)')
    homogen_parser.add_argument('--cache', help='Coefficient cache file (default: <config>.coefs.json)')

    # macro command
    macro_parser = subparsers.add_parser('macro', parents=[common],
                                         help='Solve a macro problem with homogenized materials')
    macro_parser.add_argument('config', help='Macro problem file')
    macro_parser.add_argument('--output-dir', help='Directory for VTK output (default: next to the config)')
    macro_parser.add_argument('--cache', help='Coefficient cache file override')
    macro_parser.add_argument('--phi', type=float, nargs='+', metavar='PHI',
                              help='Conductor potentials, one per conductor network')
    macro_parser.add_argument('--workers', type=_positive_int, help='Concurrent engine tasks')

    # convert command
    convert_parser = subparsers.add_parser('convert', parents=[common],
                                           help='Write VTK files from a state history file')
    convert_parser.add_argument('history', help='State history file (<prefix>.history.json)')
    convert_parser.add_argument('--output-dir', help='Directory for VTK output')
    convert_parser.add_argument('--step', type=int, help='Convert only this step')

    return parser


def main(argv=None) -> int:
    """Main CLI entry point"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    if not args.command:
        parser.print_help()
        return EXIT_USAGE

    set_verbosity(VERBOSITY_DEBUG if args.verbose else VERBOSITY_NORMAL)

    # Route to appropriate command handler
    try:
        if args.command == 'simple':
            return simple_command(args.config, args.output_dir)
        elif args.command == 'homogen':
            return homogen_command(args.config, args.workers, args.cache)
        elif args.command == 'macro':
            return macro_command(args.config, args.output_dir, args.cache, args.phi, args.workers)
        elif args.command == 'convert':
            return convert_command(args.history, args.output_dir, args.step)
    except KeyboardInterrupt:
        log_error("Operation cancelled by user")
        return EXIT_FAILURE
    except (ConfigError, DependencyError) as e:
        log_error(str(e))
        return EXIT_USAGE
    except HomfemError as e:
        log_error(str(e))
        return EXIT_FAILURE
    except OSError as e:
        log_error(f"[output] {e}")
        return EXIT_FAILURE
    return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
