#!/usr/bin/env python3
"""
mvocc command-line tool - Main Entry Point
"""
import argparse
import logging
import sys
import warnings

# Import commands
#
# NOTE:
# This file is designed to work in two modes:
# - Package mode:    python -m mvocc.main   (recommended)
# - Standalone mode: python main.py         (common locally)
#
# Relative imports (from .x import y) only work in package mode, so we
# fall back to absolute imports when __package__ is empty.
if __package__:
    from .commands import register_commands
    from .components.errors import ConfigError
else:
    from commands import register_commands
    from components.errors import ConfigError

warnings.filterwarnings('ignore', category=FutureWarning)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', default='configs/desk.ini', help='experiment INI file')
    common.add_argument('--from-manifest', help='rerun with the config recorded in a run manifest.json')
    common.add_argument('--seed', type=int, help='root seed (split into dataset / train / eval seeds)')
    common.add_argument('--threads', type=int, help='worker threads; 1 gives bitwise determinism')
    common.add_argument('--iso', type=float, help='iso level for mesh extraction')
    common.add_argument('--resolution', type=int, help='marching-cubes grid resolution')
    common.add_argument('--views', help='view count(s), comma separated')
    common.add_argument('--out', help='output path')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = argparse.ArgumentParser(prog='mvocc', description='Multi-view occupancy reconstruction experiments')
    subparsers = parser.add_subparsers(dest='command', required=True)
    register_commands(subparsers, common)
    return parser


def error_line(exc):
    message = ' '.join(str(exc).split())
    return f'error: kind={type(exc).__name__} message={message}'


def run_app(argv=None):
    """Parse argv, run one sub-command and map failures to exit codes"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO)
    logger.debug(f'Running {args.command} with {vars(args)}')
    try:
        return args.handler(args)
    except ConfigError as e:
        print(error_line(e), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f'{args.command} failed: {e}', exc_info=True)
        print(error_line(e), file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run_app())


if __name__ == '__main__':
    main()
