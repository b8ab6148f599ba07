# ===== IMPORTS =====
# === Standard library ===
import argparse
import json
import logging
import pathlib
import sys

# === Local ===
import coldrank


# ===== GLOBALS =====
logger = logging.getLogger(__name__)


# ===== MAIN =====
def commands():
    return {
        'gen': coldrank.data.prepare.prepare,
        'train': coldrank.training.train_models.train_models,
        'eval': coldrank.models.evaluate.evaluate,
        'select': coldrank.selection.run_selection,
        'bench': coldrank.engine.bench.bench,
        'serve': coldrank.engine.service.run_service,
        'shift_recovery': coldrank.training.experiments.run_shift_recovery,
    }


def build_parser(actions):
    parser = argparse.ArgumentParser(prog='coldrank')
    parser.add_argument('--log-level', default='INFO')
    subparsers = parser.add_subparsers(dest='action', required=True)
    for action in [*actions, 'pipeline']:
        subparser = subparsers.add_parser(action)
        subparser.add_argument('config_path', type=pathlib.Path)
        subparser.add_argument('--set', dest='overrides', action='append', default=[],
                               metavar='KEY=VALUE', help='dotted key, value parsed as JSON when possible')
    return parser


def run_step(command, step):
    try:
        command(step)
    except KeyError as exc:
        raise coldrank.exceptions.ConfigError(
            f'Step {step.get("action")!r} is missing required key {exc.args[0]!r}') from exc


def run(args, COMMANDS):
    document = coldrank.config.read_config(args.config_path)
    if args.action != 'pipeline':
        step = coldrank.config.resolve_step(coldrank.config.select_step(document, args.action), args.overrides)
        logger.info('===== Performing \'%s\' step =====', args.action)
        run_step(COMMANDS[args.action], step)
        return

    logger.info('Executing pipeline')
    for step in coldrank.config.pipeline_steps(document):
        if step.get('skip', False):
            logger.info('===== Skipping \'%s\' step =====', step['action'])
            continue
        if step['action'] not in COMMANDS:
            raise coldrank.exceptions.ConfigError(f'Unknown action {step["action"]!r}')
        logger.info('===== Performing \'%s\' step =====', step['action'])
        run_step(COMMANDS[step['action']], coldrank.config.resolve_step(step, args.overrides))
    logger.info('Pipeline finished')


def main(argv=None):
    COMMANDS = commands()
    args = build_parser(COMMANDS).parse_args(argv)
    coldrank.utils.setup_logging(getattr(logging, str(args.log_level).upper(), logging.INFO))
    try:
        run(args, COMMANDS)
    except (coldrank.exceptions.ColdRankError, OSError, KeyError, ValueError) as exc:
        logger.error('%s: %s', type(exc).__name__, exc)
        sys.stderr.write(json.dumps({'error': type(exc).__name__, 'message': str(exc)}) + '\n')
        return 1
    return 0


if __name__ == '__main__':
    sys.exit(main())
