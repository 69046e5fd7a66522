import logging
import sys

from algebroid import AlgebroidError
from argparser import ConfigError, UsageError, build_parser, load_params
from coadjoint import BasisExtractionError
from exprlang import EvaluationError, ParseError
from experiment import CommandRunner
from optctl import ControlError
from poisson import BasePointMismatchError, VariableMismatchError
from utils import configure_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2
EXIT_USAGE = 3


def main(argv: list | None = None) -> int:
    """
    Entry point of the algctl command.
    Parses the command line, runs the requested command and maps failures to the
    exit-code contract: 0 success, 1 validation failure, 2 numerical failure,
    3 usage or I/O error.
    """
    try:
        params = load_params()
        args = build_parser(params).parse_args(argv)
    except UsageError as error:
        print(error, file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as error:
        print(f'error: cannot read params.json: {error}', file=sys.stderr)
        return EXIT_USAGE

    configure_logging(args.quiet)
    runner = CommandRunner(args.config, args.out, args.tol, args.seed, args.quiet, params)
    options = {'f': args.f, 'g': args.g, 'x': args.x, 'eta': args.eta} if args.command == 'bracket' else {}
    try:
        return runner.execute(args.command, **options)
    except ConfigError as error:
        print(f'invalid problem file {error.path}:', file=sys.stderr)
        for message in error.errors:
            print(f'  - {message}', file=sys.stderr)
        return EXIT_VALIDATION
    except BasisExtractionError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_NUMERICAL
    except (ParseError, VariableMismatchError, BasePointMismatchError, AlgebroidError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_VALIDATION
    except ControlError as error:
        where = f' (last good time {error.last_good_time:.17g})' if error.last_good_time is not None else ''
        print(f'error: {error}{where}', file=sys.stderr)
        return EXIT_NUMERICAL
    except (EvaluationError, OverflowError) as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_USAGE
    except ValueError as error:
        print(f'error: {error}', file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == '__main__':
    sys.exit(main())
