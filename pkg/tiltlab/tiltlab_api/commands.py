__copyright__ = 'Copyright 2026, Tiltlab developers'
__license__ = 'GPL version 3'

import argparse
import logging
import sys

from tiltlab.definitions.definitions import ExitCode, SweepAxis
from tiltlab.errors import TiltlabError
from tiltlab.logger import install_logger
from tiltlab.tiltlab_api.config import (
    RunConfig,
    TiltlabConfigError,
    load_config,
    output_directory,
)
from tiltlab.tiltlab_api.pipeline import (
    Artifacts,
    nstudy,
    oracle_dump,
    recompute_metrics,
    run_pipeline,
    sweep,
)
from tiltlab.tiltlab_api.verify import REPORT_COLUMNS, verify_props
from tiltlab.tools import current_git_hash, version

LOGGER = logging.getLogger('Tiltlab')

__description__ = """Distribution matching on small enumerable trajectory spaces"""


def _verify(config: RunConfig, args) -> int:
    report = verify_props(config)
    artifacts = Artifacts(output_directory(config, args.out))
    artifacts.write_csv('verify.csv', [check.as_row() for check in report.checks], REPORT_COLUMNS)
    artifacts.stages['verify-props'] = 'done' if report.passed else 'failed'
    artifacts.write_manifest(config, 'verify-props')
    for check in report.checks:
        print('{:<28} {:<12} {}'.format(check.name, check.proposition, check.as_row()['status']))
    return ExitCode.Success if report.passed else ExitCode.Failure


def _sweep(config: RunConfig, args) -> int:
    if not args.axis:
        raise TiltlabConfigError('The sweep command needs --axis')
    try:
        axis = SweepAxis.find(args.axis)
    except ValueError as e:
        raise TiltlabConfigError(str(e))
    rows = sweep(config, axis, output_directory(config, args.out), workers=args.workers)
    failed = [row for row in rows if row['status'] == 'failed']
    return ExitCode.Failure if failed else ExitCode.Success


def _pipeline(config: RunConfig, args) -> int:
    result = run_pipeline(config, output_directory(config, args.out))
    final = result.run.final
    print('final kl_fwd={:.6g} kl_rev={:.6g}, output in {}'.format(final.kl_fwd, final.kl_rev, result.directory))
    return ExitCode.Success


def _nstudy(config: RunConfig, args) -> int:
    nstudy(config, output_directory(config, args.out))
    return ExitCode.Success


def _metrics(config: RunConfig, args) -> int:
    if not args.policy:
        raise TiltlabConfigError('The metrics command needs --policy')
    recompute_metrics(config, args.policy, output_directory(config, args.out))
    return ExitCode.Success


def _oracle_dump(config: RunConfig, args) -> int:
    oracle_dump(config, output_directory(config, args.out))
    return ExitCode.Success


COMMANDS = {
    'pipeline': _pipeline,
    'verify-props': _verify,
    'sweep': _sweep,
    'nstudy': _nstudy,
    'metrics': _metrics,
    'oracle-dump': _oracle_dump,
}


def build_parser() -> argparse.ArgumentParser:
    tool_version = "version {} ({})".format(version(), current_git_hash())
    parser = argparse.ArgumentParser(prog='tiltlab', description=__description__)
    parser.add_argument('command'         , choices=sorted(COMMANDS), help="Command to run")
    parser.add_argument('--version'       , action='version', version=tool_version, help="show version and exit")
    parser.add_argument('--config'        , required=True, metavar="PATH", help="Configuration file")
    parser.add_argument('--seed'          , type=int, default=None, help="Override the configured seed")
    parser.add_argument('--out'           , default=None, metavar="PATH", help="Output directory")
    parser.add_argument('--workers'       , type=int, default=None, help="Worker processes for sweeps")
    parser.add_argument('--axis'          , default=None, choices=SweepAxis.values(), help="Sweep axis")
    parser.add_argument('--policy'        , default=None, metavar="PATH", help="Policy file for metrics")
    parser.add_argument('--verbose'       , action='store_true', help="Verbose mode")
    return parser


def main(argv=None) -> int:
    """ Entry point of the tiltlab command. """
    parser = build_parser()
    args = parser.parse_args(argv)
    install_logger(verbose=args.verbose)

    try:
        config = load_config(args.config)
        if args.seed is not None:
            config = config.with_overrides(seed=args.seed)
        if args.workers is not None and args.workers < 1:
            raise TiltlabConfigError('--workers must be at least 1')
        return int(COMMANDS[args.command](config, args))
    except TiltlabConfigError as e:
        LOGGER.error(str(e))
        return int(ExitCode.ConfigurationError)
    except TiltlabError as e:
        LOGGER.error(str(e))
        return int(ExitCode.Failure)


if __name__ == '__main__':
    sys.exit(main())
